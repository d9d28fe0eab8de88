//! Distillation losses: hint loss, the SalGAN-teacher loss and the
//! DeepGaze-teacher loss, with the map/distribution conversions they use.
//!
//! Every loss returns its value together with the gradient for each input
//! so it can be recorded on a [`Tape`] as a single fused node. Values are
//! per-sample losses averaged over the batch.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::WeightStore;
use crate::ops::{self, minmax_in_place, softmax_in_place};
use crate::tensor::{Element, Shape, Tensor};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;
/// Added to the predicted distribution inside the KL logarithm.
pub const KL_EPS: f64 = 1e-12;
/// Allowed deviation of a pseudo distribution's sum from one.
pub const DIST_TOLERANCE: f64 = 1e-5;

/// A scalar loss with its gradient for each input, in argument order.
#[derive(Clone, Debug)]
pub struct Loss<T> {
    pub value: T,
    pub grads: Vec<Tensor<T>>,
}

impl<T: Element> Loss<T> {
    /// Records the loss as a fused tape node over `inputs`.
    pub fn record(self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        tape.fused(inputs, self.value, self.grads)
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    for (axis, x, y) in [("batch", a.n, b.n), ("channels", a.c, b.c), ("height", a.h, b.h), ("width", a.w, b.w)] {
        if x != y {
            return Err(Error::Shape {
                op,
                axis,
                expected: x,
                got: y,
            });
        }
    }
    Ok(())
}

/// Sum over layers of the per-layer mean squared error.
pub fn hint_loss<T: Element>(student: &[&Tensor<T>], teacher: &[&Tensor<T>]) -> Result<Loss<T>> {
    if student.len() != teacher.len() {
        return Err(Error::contract(format!(
            "hint loss: {} student layers vs {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for (l, (s, t)) in student.iter().zip(teacher).enumerate() {
        same_shape("hint_loss", s.shape(), t.shape()).map_err(|e| e.in_layer(&format!("hint.{l}")))?;
        let n = s.numel().max(1) as f64;
        let mut g = Tensor::zeros(s.shape());
        let mut sq = 0.0;
        for ((gv, &a), &b) in g.data_mut().iter_mut().zip(s.data()).zip(t.data()) {
            let d = a.f64() - b.f64();
            sq += d * d;
            *gv = T::of(2.0 * d / n);
        }
        value += sq / n;
        grads.push(g);
    }
    Ok(Loss {
        value: T::of(value),
        grads,
    })
}

fn check_unit_range<T: Element>(what: &str, t: &Tensor<T>) -> Result<()> {
    if let Some((i, v)) = t.data().iter().enumerate().find(|(_, v)| !(v.f64() >= 0.0 && v.f64() <= 1.0)) {
        return Err(Error::numeric(format!("{what} value {v} at index {i} outside [0, 1]")));
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `target`, added into `grad`.
fn bce_term<T: Element>(logits: &Tensor<T>, target: &Tensor<T>, grad: &mut [f64]) -> f64 {
    let n = logits.numel().max(1) as f64;
    let mut total = 0.0;
    for ((g, &z), &t) in grad.iter_mut().zip(logits.data()).zip(target.data()) {
        let (loss, dz) = bce_point(z.f64(), t.f64());
        total += loss;
        *g += dz / n;
    }
    total / n
}

/// BCE at one pixel and its derivative with respect to the logit.
fn bce_point(z: f64, t: f64) -> (f64, f64) {
    let p = ops::sigmoid_scalar(z);
    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let loss = -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
    let dz = if p == pc { p - t } else { 0.0 };
    (loss, dz)
}

/// Binary cross-entropy against the ground-truth map and/or the teacher's pseudo map.
///
/// Omitting a target drops its term. At least one target is required.
pub fn salgan_loss<T: Element>(logits: &Tensor<T>, gt: Option<&Tensor<T>>, pseudo: Option<&Tensor<T>>) -> Result<Loss<T>> {
    if gt.is_none() && pseudo.is_none() {
        return Err(Error::config("salgan loss needs a ground-truth or pseudo target"));
    }
    let mut grad = vec![0.0; logits.numel()];
    let mut value = 0.0;
    for (what, target) in [("ground truth", gt), ("pseudo map", pseudo)] {
        if let Some(t) = target {
            same_shape("salgan_loss", logits.shape(), t.shape())?;
            check_unit_range(what, t)?;
            value += bce_term(logits, t, &mut grad);
        }
    }
    Ok(Loss {
        value: T::of(value),
        grads: vec![Tensor::from_vec(logits.shape(), grad.into_iter().map(T::of).collect())?],
    })
}

/// The three terms of the DeepGaze-teacher loss, batch-averaged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeepGazeTerms {
    pub kl: f64,
    pub cosine: f64,
    pub bce: f64,
}

impl DeepGazeTerms {
    pub fn total(&self) -> f64 {
        self.kl + self.cosine + self.bce
    }
}

fn check_distribution<T: Element>(dist: &Tensor<T>) -> Result<()> {
    let len = dist.shape().item().max(1);
    for (n, item) in dist.data().chunks(len).enumerate() {
        if let Some(v) = item.iter().find(|v| !(v.f64() >= 0.0)) {
            return Err(Error::contract(format!("pseudo distribution item {n} has negative value {v}")));
        }
        let sum: f64 = item.iter().map(|v| v.f64()).sum();
        if (sum - 1.0).abs() > DIST_TOLERANCE {
            return Err(Error::contract(format!(
                "pseudo distribution item {n} sums to {sum}, expected 1 ± {DIST_TOLERANCE}"
            )));
        }
    }
    Ok(())
}

/// `KL(ȳ ‖ g(ŷ)) + (1 − cos(ȳ, g(ŷ))) + BCE(σ(ŷ), f(ȳ))` with g the spatial
/// softmax and f min-max scaling; returns the loss and its separate terms.
pub fn deepgaze_loss_terms<T: Element>(logits: &Tensor<T>, pseudo_dist: &Tensor<T>) -> Result<(Loss<T>, DeepGazeTerms)> {
    let s = logits.shape();
    if s.c != 1 {
        return Err(Error::Shape {
            op: "deepgaze_loss",
            axis: "channels",
            expected: 1,
            got: s.c,
        });
    }
    same_shape("deepgaze_loss", s, pseudo_dist.shape())?;
    check_distribution(pseudo_dist)?;
    let len = s.item().max(1);
    let batch = s.n.max(1) as f64;
    let mut terms = DeepGazeTerms {
        kl: 0.0,
        cosine: 0.0,
        bce: 0.0,
    };
    let mut grad = vec![0.0; logits.numel()];
    for ((z, y), gz) in logits
        .data()
        .chunks(len)
        .zip(pseudo_dist.data().chunks(len))
        .zip(grad.chunks_mut(len))
    {
        let z: Vec<f64> = z.iter().map(|v| v.f64()).collect();
        let y: Vec<f64> = y.iter().map(|v| v.f64()).collect();
        let mut g = z.clone();
        softmax_in_place(&mut g);
        let mut f = y.clone();
        minmax_in_place(&mut f);

        let mut kl = 0.0;
        let mut dg = vec![0.0; len];
        for i in 0..len {
            if y[i] > 0.0 {
                kl += y[i] * (y[i] / (g[i] + KL_EPS)).ln();
                dg[i] -= y[i] / (g[i] + KL_EPS);
            }
        }

        let dot: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ng = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        let cos = dot / (ny * ng);
        for i in 0..len {
            dg[i] -= y[i] / (ny * ng) - cos * g[i] / (ng * ng);
        }

        // softmax backward: dz = g * (dg - <g, dg>)
        let inner: f64 = g.iter().zip(&dg).map(|(a, b)| a * b).sum();
        let mut bce = 0.0;
        for i in 0..len {
            let (l, dzb) = bce_point(z[i], f[i]);
            bce += l;
            gz[i] = (g[i] * (dg[i] - inner) + dzb / len as f64) / batch;
        }
        terms.kl += kl / batch;
        terms.cosine += (1.0 - cos) / batch;
        terms.bce += bce / len as f64 / batch;
    }
    let loss = Loss {
        value: T::of(terms.total()),
        grads: vec![Tensor::from_vec(s, grad.into_iter().map(T::of).collect())?],
    };
    Ok((loss, terms))
}

pub fn deepgaze_loss<T: Element>(logits: &Tensor<T>, pseudo_dist: &Tensor<T>) -> Result<Loss<T>> {
    deepgaze_loss_terms(logits, pseudo_dist).map(|(l, _)| l)
}

/// g: spatial softmax of single-channel logits.
pub fn to_distribution<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    ops::softmax_spatial(logits)
}

/// f: per-item min-max scaling to [0, 1]; constant items become zeros.
pub fn distribution_to_map<T: Element>(dist: &Tensor<T>) -> Tensor<T> {
    ops::minmax_normalize(dist)
}

pub const TEACHER_HINT_PREFIX: &str = "teacher.hint.";
pub const TEACHER_PSEUDO_MAP: &str = "teacher.pseudo_map";
pub const TEACHER_PSEUDO_DIST: &str = "teacher.pseudo_dist";

/// Teacher outputs for one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherBundle<T = f32> {
    /// Either empty or four intermediate feature maps, finest first.
    pub hints: Vec<Tensor<T>>,
    /// SalGAN-style map in [0, 1].
    pub pseudo_map: Option<Tensor<T>>,
    /// DeepGaze-style distribution summing to one.
    pub pseudo_dist: Option<Tensor<T>>,
}

impl<T: Element> TeacherBundle<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.hints.is_empty() && self.hints.len() != 4 {
            return Err(Error::contract(format!("teacher bundle has {} hint tensors, expected 4", self.hints.len())));
        }
        if let Some(m) = &self.pseudo_map {
            check_unit_range("pseudo map", m)?;
        }
        if let Some(d) = &self.pseudo_dist {
            check_distribution(d)?;
        }
        Ok(())
    }

    /// Reads the reserved slot names; missing entries stay absent.
    pub fn from_store(store: &WeightStore<T>) -> Result<Self> {
        let mut hints = Vec::new();
        while let Ok(t) = store.get(&format!("{TEACHER_HINT_PREFIX}{}", hints.len())) {
            hints.push(t.clone());
        }
        let bundle = TeacherBundle {
            hints,
            pseudo_map: store.get(TEACHER_PSEUDO_MAP).ok().cloned(),
            pseudo_dist: store.get(TEACHER_PSEUDO_DIST).ok().cloned(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn to_store(&self) -> WeightStore<T> {
        let mut store = WeightStore::new();
        for (i, h) in self.hints.iter().enumerate() {
            store.insert(format!("{TEACHER_HINT_PREFIX}{i}"), h.clone());
        }
        if let Some(m) = &self.pseudo_map {
            store.insert(TEACHER_PSEUDO_MAP, m.clone());
        }
        if let Some(d) = &self.pseudo_dist {
            store.insert(TEACHER_PSEUDO_DIST, d.clone());
        }
        store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn hint_hand_case() {
        let l = hint_loss(&[&map(&[0.0, 0.0])], &[&map(&[2.0, 2.0])]).unwrap();
        assert_eq!(l.value, 4.0);
        assert_eq!(l.grads[0].data(), &[-2.0, -2.0]);
    }

    #[test]
    fn hint_shape_error_names_layer() {
        let e = hint_loss(&[&map(&[0.0]), &map(&[0.0])], &[&map(&[0.0]), &map(&[0.0, 1.0])]).unwrap_err();
        assert!(e.to_string().contains("hint.1"), "{e}");
    }

    #[test]
    fn salgan_half_targets() {
        let half = map(&[0.5; 4]);
        let l = salgan_loss(&map(&[0.0; 4]), Some(&half), Some(&half)).unwrap();
        assert!((l.value - 2.0 * 2f64.ln()).abs() < 1e-12);
        let one = salgan_loss(&map(&[0.0; 4]), None, Some(&half)).unwrap();
        assert!((one.value - 2f64.ln()).abs() < 1e-12);
        assert!(salgan_loss(&map(&[0.0]), Some(&map(&[1.5])), None).is_err());
        assert!(salgan_loss::<f64>(&map(&[0.0]), None, None).is_err());
    }

    #[test]
    fn deepgaze_two_pixel_case() {
        let (l, t) = deepgaze_loss_terms(&map(&[0.0, 0.0]), &map(&[0.7, 0.3])).unwrap();
        assert!((t.kl - 0.082_282).abs() < 1e-5, "{t:?}");
        assert!((t.cosine - 0.071_523).abs() < 1e-5, "{t:?}");
        assert!((t.bce - 2f64.ln()).abs() < 1e-12);
        assert!((l.value - 0.846_96).abs() < 1e-5);
    }

    #[test]
    fn deepgaze_rejects_unnormalized() {
        assert!(matches!(
            deepgaze_loss(&map(&[0.0, 0.0]), &map(&[0.7, 0.4])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn conversions() {
        let d = to_distribution(&map(&[3.0; 4])).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let f = distribution_to_map(&map(&[0.1, 0.2, 0.3]));
        assert!(f.max_abs_diff(&map(&[0.0, 0.5, 1.0])) < 1e-12);
        assert!(distribution_to_map(&d).data().iter().all(|&v| v == 0.0));
    }
}
