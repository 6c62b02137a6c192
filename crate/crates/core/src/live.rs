//! One step of the live teaching loop: frame → hand mask → object highlight
//! → live diversity point.

use crate::diversity::{Embedder, LivePoint, ProjectionView};
use crate::error::Result;
use crate::raster::{Frame, Mask};
use crate::segmenter::{HandSegmenter, ObjectPrediction, ObjectSegmenter};
use crate::session::CategoryId;

#[derive(Clone, Debug)]
pub struct LiveStep {
    pub hand_mask: Mask,
    /// Absent until an object segmenter is loaded.
    pub highlight: Option<ObjectPrediction>,
    /// Absent without an active class or a projection in the embedder's space.
    pub live_point: Option<LivePoint>,
}

pub struct LiveLoop<'a> {
    pub hands: &'a dyn HandSegmenter,
    pub objects: Option<&'a ObjectSegmenter>,
    pub view: Option<&'a ProjectionView>,
    pub embedder: &'a dyn Embedder,
}

impl LiveLoop<'_> {
    pub fn step(&self, frame: &Frame, class: Option<CategoryId>) -> Result<LiveStep> {
        let hand_mask = self.hands.segment_hands(frame)?;
        let highlight = match self.objects {
            Some(seg) => Some(seg.segment_object(frame, &hand_mask)?),
            None => None,
        };
        let live_point = match (self.view, class) {
            (Some(view), Some(c)) if view.space == self.embedder.space_id() => {
                Some(view.live_point(self.embedder, frame, c)?)
            }
            _ => None,
        };
        Ok(LiveStep {
            hand_mask,
            highlight,
            live_point,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scenes, teaching_set, SceneConfig};
    use crate::diversity::{EmbeddingCache, PixelEmbedder};
    use crate::segmenter::{HeuristicHandSegmenter, UNetConfig};
    use crate::session::Condition;

    #[test]
    fn step_fills_what_is_available() {
        let scenes = generate_scenes(6, 2, &SceneConfig::teaching(64, 2, false));
        let set = teaching_set(&scenes, 2, Condition::Naive).unwrap();
        let emb = PixelEmbedder::default();
        let view = ProjectionView::build(&set, &emb, &mut EmbeddingCache::default()).unwrap();
        let hands = HeuristicHandSegmenter::default();
        let seg = ObjectSegmenter::new(UNetConfig { resolution: 32, ..UNetConfig::default() }, 1).unwrap();
        let full = LiveLoop { hands: &hands, objects: Some(&seg), view: Some(&view), embedder: &emb };
        let step = full.step(&scenes[0].frame, Some(0)).unwrap();
        assert_eq!(step.highlight.unwrap().mask.dims(), (64, 64));
        assert_eq!(step.live_point.unwrap().novelty, Some(0.0));
        assert!(step.hand_mask.area() > 0);

        let bare = LiveLoop { hands: &hands, objects: None, view: None, embedder: &emb };
        let step = bare.step(&scenes[0].frame, Some(0)).unwrap();
        assert!(step.highlight.is_none() && step.live_point.is_none());

        let other = PixelEmbedder::new(8, 8, 1);
        let mismatched = LiveLoop { hands: &hands, objects: None, view: Some(&view), embedder: &other };
        assert!(mismatched.step(&scenes[0].frame, Some(0)).unwrap().live_point.is_none());
    }
}
