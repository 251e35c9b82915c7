//! Tiny synthetic discrete tasks with exact joint tables.
//!
//! Views are conditionally independent given the label, so the joint is
//! `p(y) * prod_k p(x_k | y)`. Alphabets are small enough to enumerate,
//! which makes every mutual-information quantity computable exactly; the
//! learned estimators are tested against these brute-force values.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAX_CLASSES: usize = 8;
const MAX_ALPHABET: usize = 16;
const MAX_VIEWS: usize = 3;

/// Explicit joint distribution `p(x_{1:K}, y)` with per-view conditionals.
#[derive(Clone, Debug)]
pub struct JointTable {
    /// `p(y)`.
    py: Vec<f64>,
    /// `px_given_y[k][y][x]`.
    px_given_y: Vec<Vec<Vec<f64>>>,
}

fn entropy_bits<I: IntoIterator<Item = f64>>(probs: I) -> f64 {
    probs
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.log2())
        .sum()
}

fn check_normalized(label: &str, dist: &[f64]) -> Result<()> {
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || dist.iter().any(|&p| p < 0.0) {
        return Err(Error::UnnormalizedTable(sum));
    }
    let _ = label;
    Ok(())
}

impl JointTable {
    pub fn new(py: Vec<f64>, px_given_y: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        assert!(py.len() <= MAX_CLASSES, "at most {MAX_CLASSES} classes");
        assert!(px_given_y.len() <= MAX_VIEWS, "at most {MAX_VIEWS} views");
        check_normalized("p(y)", &py)?;
        for view in &px_given_y {
            assert_eq!(view.len(), py.len(), "one conditional row per class");
            for row in view {
                assert!(row.len() <= MAX_ALPHABET, "alphabet too large");
                check_normalized("p(x|y)", row)?;
            }
        }
        Ok(JointTable { py, px_given_y })
    }

    /// Random strictly positive table.
    pub fn random(classes: usize, alphabets: &[usize], seed: u64) -> Result<Self> {
        let mut rng = crate::rng::derived(seed, "synth-table");
        let mut draw = |n: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        };
        let py = draw(classes);
        let px_given_y = alphabets
            .iter()
            .map(|&a| (0..classes).map(|_| draw(a)).collect())
            .collect();
        JointTable::new(py, px_given_y)
    }

    /// Every view copies the label exactly; labels uniform.
    pub fn copy_channel(classes: usize, views: usize) -> Result<Self> {
        let py = vec![1.0 / classes as f64; classes];
        let cond: Vec<Vec<f64>> = (0..classes)
            .map(|y| (0..classes).map(|x| if x == y { 1.0 } else { 0.0 }).collect())
            .collect();
        JointTable::new(py, vec![cond; views])
    }

    /// Views independent of the label (uniform conditionals).
    pub fn independent(classes: usize, alphabets: &[usize]) -> Result<Self> {
        let py = vec![1.0 / classes as f64; classes];
        let px_given_y = alphabets
            .iter()
            .map(|&a| vec![vec![1.0 / a as f64; a]; classes])
            .collect();
        JointTable::new(py, px_given_y)
    }

    /// Each view reproduces the label with probability `fidelity` and is
    /// otherwise uniform over the remaining symbols. A clean knob for
    /// monotone informativeness experiments.
    pub fn noisy_copy(classes: usize, views: usize, fidelity: f64) -> Result<Self> {
        assert!((0.0..=1.0).contains(&fidelity));
        let py = vec![1.0 / classes as f64; classes];
        let off = (1.0 - fidelity) / (classes - 1) as f64;
        let cond: Vec<Vec<f64>> = (0..classes)
            .map(|y| {
                (0..classes)
                    .map(|x| if x == y { fidelity } else { off })
                    .collect()
            })
            .collect();
        JointTable::new(py, vec![cond; views])
    }

    pub fn num_classes(&self) -> usize {
        self.py.len()
    }

    pub fn num_views(&self) -> usize {
        self.px_given_y.len()
    }

    pub fn alphabet(&self, k: usize) -> usize {
        self.px_given_y[k][0].len()
    }

    pub fn label_entropy_bits(&self) -> f64 {
        entropy_bits(self.py.iter().copied())
    }

    /// Enumerate all `(x_1..x_K)` combinations.
    fn view_combos(&self) -> Vec<Vec<usize>> {
        let mut combos: Vec<Vec<usize>> = vec![vec![]];
        for k in 0..self.num_views() {
            let a = self.alphabet(k);
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    (0..a).map(move |x| {
                        let mut c2 = c.clone();
                        c2.push(x);
                        c2
                    })
                })
                .collect();
        }
        combos
    }

    pub fn joint_prob(&self, xs: &[usize], y: usize) -> f64 {
        let mut p = self.py[y];
        for (k, &x) in xs.iter().enumerate() {
            p *= self.px_given_y[k][y][x];
        }
        p
    }

    /// Exact `I(Y; X_k)` in bits.
    pub fn mi_label_view(&self, k: usize) -> f64 {
        let a = self.alphabet(k);
        let mut px = vec![0.0; a];
        for (y, &py) in self.py.iter().enumerate() {
            for x in 0..a {
                px[x] += py * self.px_given_y[k][y][x];
            }
        }
        let mut mi = 0.0;
        for (y, &py) in self.py.iter().enumerate() {
            for x in 0..a {
                let pxy = py * self.px_given_y[k][y][x];
                if pxy > 0.0 {
                    mi += pxy * (pxy / (py * px[x])).log2();
                }
            }
        }
        mi
    }

    /// Exact `I(Y; U_{1:K})` in bits for deterministic per-view code maps
    /// `u_k = code[k](x_k)`.
    pub fn mi_label_codes(&self, code: &[&dyn Fn(usize) -> u64]) -> f64 {
        assert_eq!(code.len(), self.num_views());
        // p(y, u_{1:K}) by pushing the table through the maps
        let mut joint: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
        for combo in self.view_combos() {
            let key: Vec<u64> = combo.iter().enumerate().map(|(k, &x)| code[k](x)).collect();
            let slot = joint.entry(key).or_insert_with(|| vec![0.0; self.num_classes()]);
            for y in 0..self.num_classes() {
                slot[y] += self.joint_prob(&combo, y);
            }
        }
        let hy = self.label_entropy_bits();
        let hu = entropy_bits(joint.values().map(|v| v.iter().sum::<f64>()));
        let huy = entropy_bits(joint.values().flat_map(|v| v.iter().copied()));
        hy + hu - huy
    }

    /// Exact `I(Y; X_{1:K})` in bits.
    pub fn mi_label_views_joint(&self) -> f64 {
        let identity: Vec<Box<dyn Fn(usize) -> u64>> =
            (0..self.num_views()).map(|_| Box::new(|x: usize| x as u64) as _).collect();
        let refs: Vec<&dyn Fn(usize) -> u64> = identity.iter().map(|b| b.as_ref()).collect();
        self.mi_label_codes(&refs)
    }

    /// Exact `I(Y; U_k)` for a single device's code map.
    pub fn mi_label_code(&self, k: usize, code: &dyn Fn(usize) -> u64) -> f64 {
        let mut joint: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for x in 0..self.alphabet(k) {
            let slot = joint.entry(code(x)).or_insert_with(|| vec![0.0; self.num_classes()]);
            for (y, &py) in self.py.iter().enumerate() {
                slot[y] += py * self.px_given_y[k][y][x];
            }
        }
        let hy = self.label_entropy_bits();
        let hu = entropy_bits(joint.values().map(|v| v.iter().sum::<f64>()));
        let huy = entropy_bits(joint.values().flat_map(|v| v.iter().copied()));
        hy + hu - huy
    }

    /// Exact `H(U_k)` in bits for a single device's code map.
    pub fn code_entropy(&self, k: usize, code: &dyn Fn(usize) -> u64) -> f64 {
        let mut pu: BTreeMap<u64, f64> = BTreeMap::new();
        for x in 0..self.alphabet(k) {
            let mut px = 0.0;
            for (y, &py) in self.py.iter().enumerate() {
                px += py * self.px_given_y[k][y][x];
            }
            *pu.entry(code(x)).or_insert(0.0) += px;
        }
        entropy_bits(pu.values().copied())
    }

    /// Draw one `(x_{1:K}, y)` outcome.
    pub fn sample(&self, rng: &mut Rng) -> (Vec<usize>, usize) {
        let y = sample_categorical(&self.py, rng);
        let xs = self
            .px_given_y
            .iter()
            .map(|view| sample_categorical(&view[y], rng))
            .collect();
        (xs, y)
    }

    /// Sample a dataset with one-hot encoded views.
    pub fn sample_dataset(&self, n: usize, rng: &mut Rng) -> Result<MultiViewDataset> {
        let k = self.num_views();
        let mut view_data: Vec<Vec<f64>> =
            (0..k).map(|i| vec![0.0; n * self.alphabet(i)]).collect();
        let mut labels = Vec::with_capacity(n);
        for row in 0..n {
            let (xs, y) = self.sample(rng);
            for (i, &x) in xs.iter().enumerate() {
                view_data[i][row * self.alphabet(i) + x] = 1.0;
            }
            labels.push(y);
        }
        let views = view_data
            .into_iter()
            .enumerate()
            .map(|(i, d)| Tensor::matrix(n, self.alphabet(i), d).unwrap())
            .collect();
        MultiViewDataset::new(views, labels, self.num_classes())
    }
}

fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_channel_one_bit() {
        let t = JointTable::copy_channel(2, 2).unwrap();
        assert!((t.mi_label_view(0) - 1.0).abs() < 1e-12);
        assert!((t.mi_label_views_joint() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_views_zero_information() {
        let t = JointTable::independent(4, &[8, 8]).unwrap();
        assert!(t.mi_label_view(0).abs() < 1e-12);
        assert!(t.mi_label_views_joint().abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized() {
        let py = vec![0.6, 0.6];
        let cond = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]];
        assert!(matches!(
            JointTable::new(py, cond),
            Err(Error::UnnormalizedTable(_))
        ));
    }

    #[test]
    fn constant_code_has_zero_entropy_and_information() {
        let t = JointTable::random(4, &[8, 8], 3).unwrap();
        let constant = |_x: usize| 0u64;
        assert!(t.code_entropy(0, &constant).abs() < 1e-12);
        assert!(t.mi_label_code(0, &constant).abs() < 1e-12);
    }

    #[test]
    fn identity_code_matches_view_information() {
        let t = JointTable::random(3, &[5, 7], 11).unwrap();
        let ident = |x: usize| x as u64;
        assert!((t.mi_label_code(0, &ident) - t.mi_label_view(0)).abs() < 1e-12);
    }

    #[test]
    fn noisy_copy_interpolates() {
        let hi = JointTable::noisy_copy(4, 1, 0.95).unwrap();
        let lo = JointTable::noisy_copy(4, 1, 0.4).unwrap();
        assert!(hi.mi_label_view(0) > lo.mi_label_view(0));
    }

    #[test]
    fn dataset_views_are_one_hot() {
        let t = JointTable::random(3, &[4, 6], 5).unwrap();
        let mut rng = crate::rng::derived(5, "t");
        let ds = t.sample_dataset(50, &mut rng).unwrap();
        assert_eq!(ds.num_views(), 2);
        assert_eq!(ds.view_dim(1), 6);
        for i in 0..ds.len() {
            let s = ds.sample(i);
            for v in &s.views {
                assert_eq!(v.data().iter().filter(|&&p| p == 1.0).count(), 1);
                assert_eq!(v.data().iter().filter(|&&p| p == 0.0).count(), v.len() - 1);
            }
        }
    }
}
