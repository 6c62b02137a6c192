use rand::Rng;

use super::{fill_normal, gemm, FeatureMap, ParamLayout};

/// Stride-1 convolution with "same" zero padding. Kernel size 1 or 3.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    w_off: usize,
    b_off: usize,
}

/// What a convolution keeps from its forward pass.
pub struct ConvCache {
    height: usize,
    width: usize,
    /// im2col matrix for 3×3 kernels, the raw input for 1×1.
    cols: Vec<f32>,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        let w_off = layout.alloc(out_ch * in_ch * kernel * kernel);
        let b_off = layout.alloc(out_ch);
        Self {
            in_ch,
            out_ch,
            kernel,
            w_off,
            b_off,
        }
    }

    fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng>(&self, params: &mut [f32], rng: &mut R) {
        let std = (2.0 / self.fan_in() as f32).sqrt();
        self.init_with_std(params, rng, std);
    }

    pub fn init_with_std<R: Rng>(&self, params: &mut [f32], rng: &mut R, std: f32) {
        let n = self.out_ch * self.fan_in();
        fill_normal(rng, &mut params[self.w_off..self.w_off + n], std);
        params[self.b_off..self.b_off + self.out_ch].fill(0.0);
    }

    fn weights<'a>(&self, params: &'a [f32]) -> &'a [f32] {
        &params[self.w_off..self.w_off + self.out_ch * self.fan_in()]
    }

    fn columns(&self, x: &FeatureMap) -> Vec<f32> {
        if self.kernel == 1 {
            x.data.clone()
        } else {
            im2col3(x)
        }
    }

    fn apply(&self, params: &[f32], cols: &[f32], h: usize, w: usize) -> FeatureMap {
        let hw = h * w;
        let mut out = FeatureMap::zeros(self.out_ch, h, w);
        let bias = &params[self.b_off..self.b_off + self.out_ch];
        for (plane, &b) in out.data.chunks_mut(hw).zip(bias) {
            plane.fill(b);
        }
        gemm(
            self.out_ch,
            self.fan_in(),
            hw,
            self.weights(params),
            false,
            cols,
            false,
            &mut out.data,
            1.0,
        );
        out
    }

    pub fn forward(&self, params: &[f32], x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let cols = self.columns(x);
        let out = self.apply(params, &cols, x.height, x.width);
        let cache = ConvCache {
            height: x.height,
            width: x.width,
            cols,
        };
        (out, cache)
    }

    /// Forward pass without keeping a cache.
    pub fn infer(&self, params: &[f32], x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let cols = self.columns(x);
        self.apply(params, &cols, x.height, x.width)
    }

    /// Accumulate parameter gradients into `grads`; return the input gradient
    /// when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f32],
        cache: &ConvCache,
        dy: &FeatureMap,
        grads: &mut [f32],
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let (h, w) = (cache.height, cache.width);
        let hw = h * w;
        let fan_in = self.fan_in();
        for (c, plane) in dy.data.chunks(hw).enumerate() {
            grads[self.b_off + c] += plane.iter().sum::<f32>();
        }
        let gw = &mut grads[self.w_off..self.w_off + self.out_ch * fan_in];
        gemm(self.out_ch, hw, fan_in, &dy.data, false, &cache.cols, true, gw, 1.0);
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0f32; fan_in * hw];
        gemm(
            fan_in,
            self.out_ch,
            hw,
            self.weights(params),
            true,
            &dy.data,
            false,
            &mut dcols,
            0.0,
        );
        if self.kernel == 1 {
            Some(FeatureMap::from_vec(self.in_ch, h, w, dcols))
        } else {
            Some(col2im3(&dcols, self.in_ch, h, w))
        }
    }
}

/// Unfold 3×3 neighbourhoods: row `ci*9 + ky*3 + kx`, column `y*w + x`.
fn im2col3(x: &FeatureMap) -> Vec<f32> {
    let (c, h, w) = (x.channels, x.height, x.width);
    let hw = h * w;
    let mut cols = vec![0.0f32; c * 9 * hw];
    for ci in 0..c {
        let src = x.plane(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &src[sy as usize * w..][..w];
                    let dst_row = &mut row[y * w..][..w];
                    match kx {
                        0 => dst_row[1..].copy_from_slice(&src_row[..w - 1]),
                        1 => dst_row.copy_from_slice(src_row),
                        _ => dst_row[..w - 1].copy_from_slice(&src_row[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f32], c: usize, h: usize, w: usize) -> FeatureMap {
    let hw = h * w;
    let mut out = FeatureMap::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..][..hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[sy as usize * w..][..w];
                    let src_row = &row[y * w..][..w];
                    let (d, s) = match kx {
                        0 => (&mut dst_row[..w - 1], &src_row[1..]),
                        1 => (&mut dst_row[..], &src_row[..]),
                        _ => (&mut dst_row[1..], &src_row[..w - 1]),
                    };
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
    out
}

/// 2×2, stride-2 transposed convolution (exact ×2 upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub in_ch: usize,
    pub out_ch: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvTranspose2x2 {
    pub fn new(layout: &mut ParamLayout, in_ch: usize, out_ch: usize) -> Self {
        let w_off = layout.alloc(out_ch * 4 * in_ch);
        let b_off = layout.alloc(out_ch);
        Self {
            in_ch,
            out_ch,
            w_off,
            b_off,
        }
    }

    pub fn init<R: Rng>(&self, params: &mut [f32], rng: &mut R) {
        let std = (2.0 / self.in_ch as f32).sqrt();
        fill_normal(rng, &mut params[self.w_off..self.w_off + self.out_ch * 4 * self.in_ch], std);
        params[self.b_off..self.b_off + self.out_ch].fill(0.0);
    }

    fn weights<'a>(&self, params: &'a [f32]) -> &'a [f32] {
        // row (co*4 + dy*2 + dx), column ci
        &params[self.w_off..self.w_off + self.out_ch * 4 * self.in_ch]
    }

    pub fn forward(&self, params: &[f32], x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels, self.in_ch, "up-conv input channels");
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let mut z = vec![0.0f32; self.out_ch * 4 * hw];
        gemm(self.out_ch * 4, self.in_ch, hw, self.weights(params), false, &x.data, false, &mut z, 0.0);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = FeatureMap::zeros(self.out_ch, oh, ow);
        for co in 0..self.out_ch {
            let b = params[self.b_off + co];
            let plane = &mut out.data[co * oh * ow..][..oh * ow];
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                let zr = &z[(co * 4 + k) * hw..][..hw];
                for y in 0..h {
                    let orow = &mut plane[(2 * y + dy) * ow..][..ow];
                    for x in 0..w {
                        orow[2 * x + dx] = zr[y * w + x] + b;
                    }
                }
            }
        }
        out
    }

    /// `input` is the tensor that was fed to [`ConvTranspose2x2::forward`].
    pub fn backward(
        &self,
        params: &[f32],
        input: &FeatureMap,
        dy_map: &FeatureMap,
        grads: &mut [f32],
    ) -> FeatureMap {
        let (h, w) = (input.height, input.width);
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dz = vec![0.0f32; self.out_ch * 4 * hw];
        for co in 0..self.out_ch {
            let plane = &dy_map.data[co * oh * ow..][..oh * ow];
            grads[self.b_off + co] += plane.iter().sum::<f32>();
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                let zr = &mut dz[(co * 4 + k) * hw..][..hw];
                for y in 0..h {
                    let orow = &plane[(2 * y + dy) * ow..][..ow];
                    for x in 0..w {
                        zr[y * w + x] = orow[2 * x + dx];
                    }
                }
            }
        }
        let gw = &mut grads[self.w_off..self.w_off + self.out_ch * 4 * self.in_ch];
        gemm(self.out_ch * 4, hw, self.in_ch, &dz, false, &input.data, true, gw, 1.0);
        let mut dx = FeatureMap::zeros(self.in_ch, h, w);
        gemm(self.in_ch, self.out_ch * 4, hw, self.weights(params), true, &dz, false, &mut dx.data, 0.0);
        dx
    }
}

/// 2×2 max pooling, stride 2. Height and width must be even.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaxPool2;

pub struct PoolCache {
    in_h: usize,
    in_w: usize,
    argmax: Vec<u32>,
}

impl MaxPool2 {
    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, PoolCache) {
        let (c, h, w) = (x.channels, x.height, x.width);
        assert!(h % 2 == 0 && w % 2 == 0, "max-pool needs even dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = FeatureMap::zeros(c, oh, ow);
        let mut argmax = vec![0u32; c * oh * ow];
        for ci in 0..c {
            let src = x.plane(ci);
            for y in 0..oh {
                for xx in 0..ow {
                    let base = (2 * y) * w + 2 * xx;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    let o = ci * oh * ow + y * ow + xx;
                    out.data[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        (out, PoolCache { in_h: h, in_w: w, argmax })
    }

    pub fn backward(&self, cache: &PoolCache, dy: &FeatureMap) -> FeatureMap {
        let c = dy.channels;
        let n_out = dy.plane_len();
        let mut dx = FeatureMap::zeros(c, cache.in_h, cache.in_w);
        let n_in = cache.in_h * cache.in_w;
        for ci in 0..c {
            for o in 0..n_out {
                let idx = ci * n_out + o;
                dx.data[ci * n_in + cache.argmax[idx] as usize] += dy.data[idx];
            }
        }
        dx
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Mask `grad` by the positive entries of the ReLU *output*.
pub fn relu_backward(output: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Fully connected layer `y = W x + b`, `W` stored `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    w_off: usize,
    b_off: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, inputs: usize, outputs: usize) -> Self {
        let w_off = layout.alloc(inputs * outputs);
        let b_off = layout.alloc(outputs);
        Self {
            inputs,
            outputs,
            w_off,
            b_off,
        }
    }

    pub fn init_with_std<R: Rng>(&self, params: &mut [f32], rng: &mut R, std: f32) {
        fill_normal(rng, &mut params[self.w_off..self.w_off + self.inputs * self.outputs], std);
        params[self.b_off..self.b_off + self.outputs].fill(0.0);
    }

    pub fn row<'a>(&self, params: &'a [f32], out: usize) -> &'a [f32] {
        &params[self.w_off + out * self.inputs..][..self.inputs]
    }

    pub fn forward(&self, params: &[f32], x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|o| {
                let dot: f32 = self.row(params, o).iter().zip(x).map(|(a, b)| a * b).sum();
                dot + params[self.b_off + o]
            })
            .collect()
    }

    /// Accumulate gradients; returns `dL/dx`.
    pub fn backward(&self, params: &[f32], x: &[f32], dy: &[f32], grads: &mut [f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            grads[self.b_off + o] += g;
            let row = self.row(params, o);
            let grow = &mut grads[self.w_off + o * self.inputs..][..self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let mut m = FeatureMap::zeros(c, h, w);
        fill_normal(rng, &mut m.data, 1.0);
        m
    }

    /// Loss = Σ r ⊙ y for a fixed random `r`; its gradient w.r.t. y is `r`.
    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, 2, 3, 3);
        let mut p = vec![0.0; layout.len()];
        conv.init(&mut p, &mut rng);
        p[conv.b_off + 1] = 0.25;
        let x = random_map(&mut rng, 2, 5, 4);
        let y = conv.infer(&p, &x);
        for co in 0..3 {
            for yy in 0..5isize {
                for xx in 0..4isize {
                    let mut acc = p[conv.b_off + co];
                    for ci in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if sy < 0 || sy >= 5 || sx < 0 || sx >= 4 {
                                    continue;
                                }
                                let wi = co * 18 + ci * 9 + (ky * 3 + kx) as usize;
                                acc += p[conv.w_off + wi] * x.data[ci * 20 + (sy * 4 + sx) as usize];
                            }
                        }
                    }
                    let got = y.data[co * 20 + (yy * 4 + xx) as usize];
                    assert!((got - acc).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn conv_and_upconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, 2, 3, 3);
        let up = ConvTranspose2x2::new(&mut layout, 3, 2);
        let head = Conv2d::new(&mut layout, 2, 1, 1);
        let mut p = vec![0.0; layout.len()];
        conv.init(&mut p, &mut rng);
        up.init(&mut p, &mut rng);
        head.init(&mut p, &mut rng);
        let x = random_map(&mut rng, 2, 4, 4);
        let r = random_map(&mut rng, 1, 8, 8);

        let loss = |p: &[f32], x: &FeatureMap| {
            let a = conv.infer(p, x);
            let b = up.forward(p, &a);
            dot(&head.infer(p, &b).data, &r.data)
        };

        let (a, ca) = conv.forward(&p, &x);
        let b = up.forward(&p, &a);
        let (_, cb) = head.forward(&p, &b);
        let mut g = vec![0.0; p.len()];
        let db = head.backward(&p, &cb, &r, &mut g, true).unwrap();
        let da = up.backward(&p, &a, &db, &mut g);
        let dx = conv.backward(&p, &ca, &da, &mut g, true).unwrap();

        let eps = 1e-2f32;
        for i in (0..p.len()).step_by(7) {
            let mut pp = p.clone();
            pp[i] += eps;
            let mut pm = p.clone();
            pm[i] -= eps;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * eps as f64);
            assert!((fd - g[i] as f64).abs() < 1e-2 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
        for i in (0..x.data.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx.data[i] as f64).abs() < 1e-2 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_the_winner() {
        let x = FeatureMap::from_vec(1, 2, 2, vec![1.0, 5.0, -2.0, 3.0]);
        let (y, cache) = MaxPool2.forward(&x);
        assert_eq!(y.data, vec![5.0]);
        let dx = MaxPool2.backward(&cache, &FeatureMap::from_vec(1, 1, 1, vec![2.0]));
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layout = ParamLayout::default();
        let lin = Linear::new(&mut layout, 4, 3);
        let mut p = vec![0.0; layout.len()];
        lin.init_with_std(&mut p, &mut rng, 0.5);
        let x = [0.5f32, -1.0, 2.0, 0.1];
        let r = [1.0f32, -0.5, 0.25];
        let mut g = vec![0.0; p.len()];
        let dx = lin.backward(&p, &x, &r, &mut g);
        let f = |p: &[f32], x: &[f32]| dot(&lin.forward(p, x), &r);
        for i in 0..x.len() {
            let mut xp = x;
            xp[i] += 1e-3;
            let mut xm = x;
            xm[i] -= 1e-3;
            let fd = (f(&p, &xp) - f(&p, &xm)) / 2e-3;
            assert!((fd - dx[i] as f64).abs() < 1e-3);
        }
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += 1e-3;
            let mut pm = p.clone();
            pm[i] -= 1e-3;
            let fd = (f(&pp, &x) - f(&pm, &x)) / 2e-3;
            assert!((fd - g[i] as f64).abs() < 1e-3);
        }
    }
}
