//! Image encoder: a two-layer strided conv net pooled to one feature vector
//! per image, then a learned linear map into the language model's embedding
//! space. Each image becomes a single dense token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Single-channel image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape("image", format!("{}x{} image needs {} pixels, got {}", width, height, width * height, pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0.0; width * height] }
    }
}

/// A conditioning image, either raw pixels or a precomputed feature vector
/// that bypasses the conv stage.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageInput {
    Pixels(Image),
    Features(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    /// Output channels of the two conv layers; the second is the feature dim N.
    pub channels: [usize; 2],
    pub out_dim: usize,
    /// Whether the projection into embedding space carries a bias.
    pub proj_bias: bool,
}

impl VisionConfig {
    pub fn feature_dim(&self) -> usize {
        self.channels[1]
    }
}

#[derive(Clone, Debug)]
pub struct ImageProjector {
    pub config: VisionConfig,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: Option<ParamId>,
}

fn uniform<T: Float>(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

impl ImageProjector {
    /// Registers encoder parameters under `vision.*`. Conv weights and the
    /// projection use fan-in uniform init; biases start at zero.
    pub fn new<T: Float>(config: VisionConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let [c1, c2] = config.channels;
        let n = config.feature_dim();
        let conv1_w = store.add("vision.conv1.weight", uniform(rng, vec![c1, 9], 1.0 / 3.0), true);
        let conv1_b = store.add("vision.conv1.bias", Tensor::zeros(vec![c1]), false);
        let conv2_w = store.add("vision.conv2.weight", uniform(rng, vec![c2, 9 * c1], 1.0 / (9.0 * c1 as f64).sqrt()), true);
        let conv2_b = store.add("vision.conv2.bias", Tensor::zeros(vec![c2]), false);
        let proj_w = store.add("vision.proj.weight", uniform(rng, vec![n, config.out_dim], 1.0 / (n as f64).sqrt()), true);
        let proj_b = config.proj_bias.then(|| store.add("vision.proj.bias", Tensor::zeros(vec![config.out_dim]), false));
        Self { config, conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b }
    }

    /// Rebinds to parameters already present in `store` (after loading).
    pub fn attach<T: Float>(config: VisionConfig, store: &ParamStore<T>) -> Result<Self> {
        let need = |name: &str| store.find(name).ok_or_else(|| Error::Contract(format!("missing parameter {}", name)));
        Ok(Self {
            conv1_w: need("vision.conv1.weight")?,
            conv1_b: need("vision.conv1.bias")?,
            conv2_w: need("vision.conv2.weight")?,
            conv2_b: need("vision.conv2.bias")?,
            proj_w: need("vision.proj.weight")?,
            proj_b: if config.proj_bias { Some(need("vision.proj.bias")?) } else { None },
            config,
        })
    }

    /// Pooled conv features `[count × N]` for pixel images.
    fn conv_features<T: Float>(&self, tape: &mut Tape<T>, bind: &mut Binding, store: &ParamStore<T>, imgs: &[&Image]) -> Result<Var> {
        let s = self.config.image_size;
        let mut pixels = Vec::with_capacity(imgs.len() * s * s);
        for img in imgs {
            if img.width != s || img.height != s {
                return Err(Error::shape("encode_image", format!("expected {}x{} image, got {}x{}", s, s, img.width, img.height)));
            }
            pixels.extend(img.pixels.iter().map(|p| T::of(*p as f64)));
        }
        let b = imgs.len();
        let x = tape.constant(Tensor::new(vec![b, s, s, 1], pixels)?);
        let [c1, _] = self.config.channels;
        let g1 = ConvGeom { batch: b, height: s, width: s, channels: 1, kernel: 3, stride: 2, pad: 1 };
        let cols = tape.im2col(x, g1)?;
        let (w1, b1) = (bind.var(tape, store, self.conv1_w), bind.var(tape, store, self.conv1_b));
        let h = tape.matmul_bt(cols, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let g2 = ConvGeom { batch: b, height: g1.out_height(), width: g1.out_width(), channels: c1, kernel: 3, stride: 2, pad: 1 };
        let cols = tape.im2col(h, g2)?;
        let (w2, b2) = (bind.var(tape, store, self.conv2_w), bind.var(tape, store, self.conv2_b));
        let h = tape.matmul_bt(cols, w2)?;
        let h = tape.add_row(h, b2)?;
        let h = tape.gelu(h);
        tape.group_mean(h, b)
    }

    /// Encodes images into `[m × D]` embedding rows, row `i` from image `i`.
    pub fn encode_on_tape<T: Float>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        imgs: &[&ImageInput],
    ) -> Result<Var> {
        if imgs.is_empty() {
            return Err(Error::Contract("encode_images needs at least one image".into()));
        }
        let n = self.config.feature_dim();
        let pixel_imgs: Vec<&Image> = imgs
            .iter()
            .filter_map(|i| match i {
                ImageInput::Pixels(p) => Some(p),
                ImageInput::Features(_) => None,
            })
            .collect();
        let mut feats = Vec::new();
        for i in imgs {
            if let ImageInput::Features(f) = i {
                if f.len() != n {
                    return Err(Error::shape("encode_image", format!("feature vector of length {} but N = {}", f.len(), n)));
                }
                feats.extend(f.iter().map(|v| T::of(*v as f64)));
            }
        }
        let mut sources = Vec::new();
        if !pixel_imgs.is_empty() {
            sources.push(self.conv_features(tape, bind, store, &pixel_imgs)?);
        }
        let feat_rows = feats.len() / n.max(1);
        if feat_rows > 0 {
            sources.push(tape.constant(Tensor::new(vec![feat_rows, n], feats)?));
        }
        let features = if sources.len() == 1 {
            sources[0]
        } else {
            // restore the caller's interleaving of pixel and feature images
            let (mut pi, mut fi) = (0, 0);
            let picks: Vec<(usize, usize)> = imgs
                .iter()
                .map(|i| match i {
                    ImageInput::Pixels(_) => {
                        pi += 1;
                        (0, pi - 1)
                    }
                    ImageInput::Features(_) => {
                        fi += 1;
                        (1, fi - 1)
                    }
                })
                .collect();
            tape.gather_rows(&sources, &picks)?
        };
        let w = bind.var(tape, store, self.proj_w);
        let out = tape.matmul(features, w)?;
        match self.proj_b {
            Some(b) => {
                let b = bind.var(tape, store, b);
                tape.add_row(out, b)
            }
            None => Ok(out),
        }
    }

    /// One image to one `[1 × D]` token.
    pub fn encode_image<T: Float>(&self, store: &ParamStore<T>, img: &ImageInput) -> Result<Tensor<T>> {
        self.encode_images(store, std::slice::from_ref(img))
    }

    /// Images to `[m × D]` tokens, order preserved.
    pub fn encode_images<T: Float>(&self, store: &ParamStore<T>, imgs: &[ImageInput]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mut bind = Binding::new(store);
        let refs: Vec<&ImageInput> = imgs.iter().collect();
        let out = self.encode_on_tape(&mut tape, &mut bind, store, &refs)?;
        Ok(tape.tensor(out))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b, self.proj_w];
        ids.extend(self.proj_b);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore<f32>, ImageProjector) {
        let mut store = ParamStore::new();
        let cfg = VisionConfig { image_size: 24, channels: [4, 8], out_dim: 6, proj_bias: true };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ImageProjector::new(cfg, &mut store, &mut rng);
        (store, p)
    }

    fn img(seed: u64) -> ImageInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageInput::Pixels(Image::new(24, 24, (0..576).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
    }

    #[test]
    fn output_is_one_by_d() {
        let (store, p) = setup(1);
        let t = p.encode_image(&store, &img(3)).unwrap();
        assert_eq!(t.shape(), &[1, 6]);
    }

    #[test]
    fn blank_image_maps_to_bias() {
        let (mut store, p) = setup(1);
        let b = p.proj_b.unwrap();
        store.get_mut(b).value = Tensor::new(vec![6], vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.5]).unwrap();
        let t = p.encode_image(&store, &ImageInput::Pixels(Image::blank(24, 24))).unwrap();
        assert_eq!(t.data(), &[0.5, -1.0, 2.0, 0.0, 3.0, 1.5]);
    }

    #[test]
    fn deterministic_per_seed() {
        let (s1, p1) = setup(7);
        let (s2, p2) = setup(7);
        let a = p1.encode_image(&s1, &img(5)).unwrap();
        let b = p2.encode_image(&s2, &img(5)).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn batch_rows_match_single_and_follow_permutation() {
        let (store, p) = setup(2);
        let imgs = vec![img(10), img(11), img(12)];
        let all = p.encode_images(&store, &imgs).unwrap();
        for (i, im) in imgs.iter().enumerate() {
            assert_eq!(all.row(i), p.encode_image(&store, im).unwrap().data());
        }
        let perm = vec![imgs[2].clone(), imgs[0].clone(), imgs[1].clone()];
        let permuted = p.encode_images(&store, &perm).unwrap();
        assert_eq!(permuted.row(0), all.row(2));
        assert_eq!(permuted.row(1), all.row(0));
        assert_eq!(permuted.row(2), all.row(1));
    }

    #[test]
    fn feature_path_bypasses_conv() {
        let (store, p) = setup(4);
        let f = ImageInput::Features(vec![0.0; 8]);
        let mixed = p.encode_images(&store, &[img(1), f.clone(), img(2)]).unwrap();
        assert_eq!(mixed.row(1), p.encode_image(&store, &f).unwrap().data());
        assert_eq!(mixed.row(2), p.encode_image(&store, &img(2)).unwrap().data());
        assert!(p.encode_image(&store, &ImageInput::Features(vec![0.0; 3])).is_err());
    }

    #[test]
    fn errors() {
        let (store, p) = setup(4);
        assert!(p.encode_images(&store, &[]).is_err());
        let wrong = ImageInput::Pixels(Image::blank(12, 12));
        assert!(matches!(p.encode_image(&store, &wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_reach_conv_and_projection() {
        let (mut store, p) = setup(9);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&store);
        let im = [img(1), img(2)];
        let refs: Vec<&ImageInput> = im.iter().collect();
        let out = p.encode_on_tape(&mut tape, &mut bind, &store, &refs).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&grads, &bind);
        for id in p.param_ids() {
            let prm = store.get(id);
            assert!(prm.grad.iter().any(|g| *g != 0.0), "{} got no gradient", prm.name);
        }
    }
}
