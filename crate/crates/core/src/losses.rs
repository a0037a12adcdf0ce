//! Training objectives: task and modality cross-entropies, the label
//! independence term for `u*`, CMD similarity, HSIC independence, and
//! reconstruction, plus their weighted total.
//!
//! Every loss is built on a [`Graph`] so it can be differentiated. The
//! `*_value` functions evaluate the same code on plain matrices.

use alloc::vec;
use alloc::vec::Vec;

use crate::config::{CmdBounds, HsicBandwidth, HsicKernel, LossWeights, UcorrMode};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::{Modality, Task, MODALITY_PAIRS};

/// Allowed deviation of a probability row sum from 1.
pub const SIMPLEX_TOL: f64 = 1e-6;
/// Floor applied before taking logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;
/// Centered sums of squares at or below this are treated as zero variance.
pub const DEGENERATE_VAR: f64 = 1e-12;

fn check_simplex(g: &Graph, probs: Var) -> Result<()> {
    let p = g.value(probs);
    for r in 0..p.rows() {
        let row = p.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|v| !(*v >= -SIMPLEX_TOL)) {
            bail!(Validation, "row {r} is not a probability vector (sum {s})");
        }
    }
    Ok(())
}

fn class_indices(labels: &[f64], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            if libm::trunc(y) != y || y < 0.0 || y >= classes as f64 {
                bail!(Validation, "label {y} is not a class index below {classes}");
            }
            Ok(y as usize)
        })
        .collect()
}

fn one_hot(idx: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(idx.len(), classes);
    for (r, &c) in idx.iter().enumerate() {
        m.set(r, c, 1.0);
    }
    m
}

/// `-(1/B) sum_i log p_i[target_i]` over the rows of `probs`.
fn cross_entropy(g: &mut Graph, probs: Var, targets: &Matrix) -> Var {
    let b = targets.rows() as f64;
    let p = g.clamp(probs, LOG_FLOOR, 1.0);
    let logp = g.ln(p);
    let t = g.constant(targets.clone());
    let picked = g.mul(logp, t);
    let s = g.sum(picked);
    g.scale(s, -1.0 / b)
}

/// Mean squared error (regression, `pred` is `B x 1`) or cross-entropy
/// (classification, `pred` holds probability rows).
pub fn task_loss(g: &mut Graph, pred: Var, labels: &[f64], task: Task) -> Result<Var> {
    let (rows, cols) = g.shape(pred);
    if rows != labels.len() || rows == 0 {
        bail!(Shape, "{rows} predictions for {} labels", labels.len());
    }
    match task {
        Task::Regression => {
            if cols != 1 {
                bail!(Shape, "regression predictions must be one column, got {cols}");
            }
            let y = g.constant(Matrix::column_vector(labels));
            let d = g.sub(pred, y);
            let sq = g.mul(d, d);
            Ok(g.mean(sq))
        }
        Task::Classification { num_classes } => {
            if cols != num_classes {
                bail!(Shape, "expected {num_classes} class probabilities, got {cols}");
            }
            check_simplex(g, pred)?;
            let idx = class_indices(labels, num_classes)?;
            Ok(cross_entropy(g, pred, &one_hot(&idx, num_classes)))
        }
    }
}

/// Cross-entropy of discriminator probabilities (`B x 3`) against `modality`.
pub fn modality_loss(g: &mut Graph, probs: Var, modality: Modality) -> Result<Var> {
    let (rows, cols) = g.shape(probs);
    if cols != 3 || rows == 0 {
        bail!(Shape, "discriminator output must be B x 3, got {rows} x {cols}");
    }
    check_simplex(g, probs)?;
    let idx = vec![modality.index(); rows];
    Ok(cross_entropy(g, probs, &one_hot(&idx, 3)))
}

/// Result of [`ucorr_loss`].
#[derive(Clone, Copy, Debug)]
pub struct UcorrOutput {
    pub loss: Var,
    /// Set when a zero-variance batch made the correlation undefined; the
    /// loss is then the constant 0.
    pub degenerate: bool,
}

/// Label-dependence penalty for predictions made from `u*`.
pub fn ucorr_loss(g: &mut Graph, y_tilde: Var, labels: &[f64], task: Task, mode: UcorrMode) -> Result<UcorrOutput> {
    let (rows, cols) = g.shape(y_tilde);
    if rows != labels.len() || rows == 0 {
        bail!(Shape, "{rows} predictions for {} labels", labels.len());
    }
    match task {
        Task::Regression => {
            if cols != 1 {
                bail!(Shape, "regression predictions must be one column, got {cols}");
            }
            if rows < 2 {
                bail!(Validation, "correlation needs at least two samples");
            }
            let n = rows as f64;
            let y_mean = labels.iter().sum::<f64>() / n;
            let yc: Vec<f64> = labels.iter().map(|y| y - y_mean).collect();
            let y_ss: f64 = yc.iter().map(|v| v * v).sum();
            let p = g.value(y_tilde).data();
            let p_mean = p.iter().sum::<f64>() / n;
            let p_ss: f64 = p.iter().map(|v| (v - p_mean) * (v - p_mean)).sum();
            if y_ss <= DEGENERATE_VAR || p_ss <= DEGENERATE_VAR {
                return Ok(UcorrOutput { loss: g.constant(Matrix::scalar(0.0)), degenerate: true });
            }
            let m = g.mean(y_tilde);
            let pc = g.sub(y_tilde, m);
            let ycv = g.constant(Matrix::column_vector(&yc));
            let prod = g.mul(pc, ycv);
            let cov = g.sum(prod);
            let sq = g.mul(pc, pc);
            let ss = g.sum(sq);
            let sd = g.sqrt(ss);
            let denom = g.scale(sd, libm::sqrt(y_ss));
            let corr = g.div(cov, denom);
            let loss = match mode {
                UcorrMode::SignedCorrelation => corr,
                UcorrMode::Independence => g.mul(corr, corr),
            };
            Ok(UcorrOutput { loss, degenerate: false })
        }
        Task::Classification { num_classes } => {
            if cols != num_classes {
                bail!(Shape, "expected {num_classes} class probabilities, got {cols}");
            }
            check_simplex(g, y_tilde)?;
            let loss = match mode {
                UcorrMode::SignedCorrelation => {
                    let idx = class_indices(labels, num_classes)?;
                    let ce = cross_entropy(g, y_tilde, &one_hot(&idx, num_classes));
                    g.neg(ce)
                }
                UcorrMode::Independence => {
                    // KL(p || uniform) = sum_c p_c log p_c + log C, averaged over rows
                    let p = g.clamp(y_tilde, LOG_FLOOR, 1.0);
                    let logp = g.ln(p);
                    let plogp = g.mul(y_tilde, logp);
                    let s = g.sum(plogp);
                    let s = g.scale(s, 1.0 / rows as f64);
                    g.add_scalar(s, libm::log(num_classes as f64))
                }
            };
            Ok(UcorrOutput { loss, degenerate: false })
        }
    }
}

/// Central moment discrepancy between the row distributions of `z` and `w`
/// up to `order`, with features assumed to lie in `[lo, hi]`.
pub fn cmd(g: &mut Graph, z: Var, w: Var, order: usize, lo: f64, hi: f64) -> Result<Var> {
    let (zn, zd) = g.shape(z);
    let (wn, wd) = g.shape(w);
    if zn == 0 || wn == 0 {
        bail!(Validation, "CMD needs nonempty sample sets");
    }
    if zd != wd {
        bail!(Shape, "CMD sample widths differ: {zd} vs {wd}");
    }
    if order == 0 {
        bail!(Config, "CMD order must be at least 1");
    }
    if !(hi > lo) {
        bail!(Config, "CMD bounds need hi > lo, got ({lo}, {hi})");
    }
    let span = hi - lo;
    let mz = g.mean_cols(z);
    let mw = g.mean_cols(w);
    let d = g.sub(mz, mw);
    let n = g.norm2(d);
    let mut total = g.scale(n, 1.0 / span);
    if order >= 2 {
        let zc = g.sub(z, mz);
        let wc = g.sub(w, mw);
        for k in 2..=order {
            let zk = g.powi(zc, k as i32);
            let wk = g.powi(wc, k as i32);
            let cz = g.mean_cols(zk);
            let cw = g.mean_cols(wk);
            let d = g.sub(cz, cw);
            let n = g.norm2(d);
            let term = g.scale(n, 1.0 / libm::pow(span, k as f64));
            total = g.add(total, term);
        }
    }
    Ok(total)
}

/// Resolves the CMD interval for a group of sample sets. Fixed bounds clamp
/// the samples into the interval; empirical bounds use the joint min/max of
/// the current values as constants.
fn cmd_inputs(g: &mut Graph, sets: &[Var], bounds: CmdBounds) -> (Vec<Var>, f64, f64) {
    match bounds {
        CmdBounds::Fixed { a, b } => (sets.iter().map(|&s| g.clamp(s, a, b)).collect(), a, b),
        CmdBounds::Empirical => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &s in sets {
                for &v in g.value(s).data() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if !(hi - lo > 1e-12) {
                // all values equal: every moment difference is zero anyway
                hi = lo + 1.0;
            }
            (sets.to_vec(), lo, hi)
        }
    }
}

/// Mean CMD over the three modality pairs of `r*`.
pub fn sim_loss(g: &mut Graph, r_star: [Var; 3], order: usize, bounds: CmdBounds) -> Result<Var> {
    let (sets, lo, hi) = cmd_inputs(g, &r_star, bounds);
    let mut terms = Vec::with_capacity(3);
    for (a, b) in MODALITY_PAIRS {
        terms.push(cmd(g, sets[a.index()], sets[b.index()], order, lo, hi)?);
    }
    Ok(mean_of(g, &terms))
}

/// Kernel choice for the independence terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsicOptions {
    pub sigma: f64,
    pub kernel: HsicKernel,
    pub bandwidth: HsicBandwidth,
}

impl HsicOptions {
    pub fn fixed(sigma: f64, kernel: HsicKernel) -> Self {
        Self { sigma, kernel, bandwidth: HsicBandwidth::Fixed }
    }

    /// Kernel width for the rows of `z`.
    pub fn width_for(&self, z: &Matrix) -> f64 {
        match self.bandwidth {
            HsicBandwidth::Fixed => self.sigma,
            HsicBandwidth::Median => {
                let m = median_kernel_argument(z, self.kernel);
                // exp(-a / (2 s^2)) with 2 s^2 = sigma^2 * median(a)
                if m > 1e-12 {
                    self.sigma * libm::sqrt(m / 2.0)
                } else {
                    self.sigma
                }
            }
        }
    }
}

/// Median over pairs `i < j` of `|z_i - z_j|^2` (RBF) or `|z_i| |z_j|`.
pub fn median_kernel_argument(z: &Matrix, kernel: HsicKernel) -> f64 {
    let n = z.rows();
    let norms: Vec<f64> = (0..n).map(|i| libm::sqrt(z.row(i).iter().map(|v| v * v).sum::<f64>())).collect();
    let mut args = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            args.push(match kernel {
                HsicKernel::Rbf => z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum(),
                HsicKernel::NormProduct => norms[i] * norms[j],
            });
        }
    }
    if args.is_empty() {
        return 0.0;
    }
    args.sort_by(f64::total_cmp);
    let k = args.len();
    if k % 2 == 1 {
        args[k / 2]
    } else {
        0.5 * (args[k / 2 - 1] + args[k / 2])
    }
}

/// Empirical HSIC `Tr(K J L J) / (B - 1)^2` with one bandwidth for both kernels.
pub fn hsic(g: &mut Graph, z: Var, w: Var, sigma: f64, kernel: HsicKernel) -> Result<Var> {
    hsic_with_widths(g, z, w, sigma, sigma, kernel)
}

/// HSIC with the kernel widths chosen by `opts`.
pub fn hsic_with(g: &mut Graph, z: Var, w: Var, opts: &HsicOptions) -> Result<Var> {
    let sz = opts.width_for(g.value(z));
    let sw = opts.width_for(g.value(w));
    hsic_with_widths(g, z, w, sz, sw, opts.kernel)
}

fn hsic_with_widths(g: &mut Graph, z: Var, w: Var, sigma_z: f64, sigma_w: f64, kernel: HsicKernel) -> Result<Var> {
    let (zn, _) = g.shape(z);
    let (wn, _) = g.shape(w);
    if zn != wn {
        bail!(Shape, "HSIC row counts differ: {zn} vs {wn}");
    }
    if zn < 2 {
        bail!(Validation, "HSIC needs at least two samples");
    }
    if !(sigma_z > 0.0 && sigma_w > 0.0) {
        bail!(Config, "HSIC bandwidth must be positive, got {sigma_z} and {sigma_w}");
    }
    let gram = |g: &mut Graph, x: Var, sigma: f64| match kernel {
        HsicKernel::Rbf => g.rbf_gram(x, sigma),
        HsicKernel::NormProduct => g.norm_product_gram(x, sigma),
    };
    let k = gram(g, z, sigma_z);
    let l = gram(g, w, sigma_w);
    let t = g.centered_trace(k, l);
    let b1 = (zn - 1) as f64;
    Ok(g.scale(t, 1.0 / (b1 * b1)))
}

/// Mean HSIC over the three modality pairs of `r∩u`.
pub fn inter_independence_loss(g: &mut Graph, r_cap_u: [Var; 3], opts: &HsicOptions) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for (a, b) in MODALITY_PAIRS {
        terms.push(hsic_with(g, r_cap_u[a.index()], r_cap_u[b.index()], opts)?);
    }
    Ok(mean_of(g, &terms))
}

/// Mean over modalities of HSIC between `r*` and `u*`.
pub fn intra_exclusive_loss(g: &mut Graph, r_star: [Var; 3], u_star: [Var; 3], opts: &HsicOptions) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for m in Modality::ALL {
        terms.push(hsic_with(g, r_star[m.index()], u_star[m.index()], opts)?);
    }
    Ok(mean_of(g, &terms))
}

/// `(1/B) sum_i |pred_i - target_i|^2`.
pub fn recon_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let (pn, pd) = g.shape(pred);
    if (pn, pd) != g.shape(target) {
        bail!(Shape, "reconstruction {:?} vs target {:?}", (pn, pd), g.shape(target));
    }
    if pn == 0 {
        bail!(Validation, "reconstruction needs at least one sample");
    }
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / pn as f64))
}

/// Arithmetic mean of scalar nodes.
pub fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    assert!(!terms.is_empty(), "mean of no terms");
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// The seven loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub task: f64,
    pub modality: f64,
    pub ucorr: f64,
    pub sim: f64,
    pub h_inter: f64,
    pub h_intra: f64,
    pub recon: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 7] = ["task", "modality", "ucorr", "sim", "h_inter", "h_intra", "recon"];

    pub fn values(&self) -> [f64; 7] {
        [self.task, self.modality, self.ucorr, self.sim, self.h_inter, self.h_intra, self.recon]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self { task: v[0], modality: v[1], ucorr: v[2], sim: v[3], h_inter: v[4], h_intra: v[5], recon: v[6] }
    }

    /// Per-component weights in [`Self::NAMES`] order.
    pub fn weight_vector(w: &LossWeights) -> [f64; 7] {
        [w.task, w.modality, w.ucorr, w.sim, w.h, w.h, w.recon]
    }
}

/// Named components plus their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub components: LossComponents,
    pub total: f64,
}

/// Weighted sum of the components. Non-finite components abort with the
/// component's name.
pub fn total_loss(components: LossComponents, weights: &LossWeights) -> Result<LossReport> {
    let vals = components.values();
    for (name, v) in LossComponents::NAMES.iter().zip(vals) {
        if !v.is_finite() {
            bail!(Divergence, "loss component {name} is {v}");
        }
    }
    let total = vals.iter().zip(LossComponents::weight_vector(weights)).map(|(v, w)| v * w).sum();
    Ok(LossReport { components, total })
}

/// Checks that `graph_total` equals the weighted sum of the report's
/// components to a relative tolerance of `1e-6`.
pub fn check_decomposition(report: &LossReport, graph_total: f64) -> Result<()> {
    let scale = report.total.abs().max(graph_total.abs()).max(1e-12);
    if (report.total - graph_total).abs() / scale > 1e-6 {
        bail!(Divergence, "loss total {graph_total} does not match weighted components {}", report.total);
    }
    Ok(())
}

/// Graph nodes of the seven components of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub task: Var,
    pub modality: Var,
    pub ucorr: Var,
    pub sim: Var,
    pub h_inter: Var,
    pub h_intra: Var,
    pub recon: Var,
}

impl LossVars {
    pub fn as_array(&self) -> [Var; 7] {
        [self.task, self.modality, self.ucorr, self.sim, self.h_inter, self.h_intra, self.recon]
    }

    /// Weighted total as a graph node.
    pub fn weighted_total(&self, g: &mut Graph, weights: &LossWeights) -> Var {
        let ws = LossComponents::weight_vector(weights);
        let vars = self.as_array();
        let mut acc = g.scale(vars[0], ws[0]);
        for (v, w) in vars.iter().zip(ws).skip(1) {
            let t = g.scale(*v, w);
            acc = g.add(acc, t);
        }
        acc
    }

    pub fn components(&self, g: &Graph) -> LossComponents {
        LossComponents::from_values(self.as_array().map(|v| g.scalar(v)))
    }
}

fn with_graph<T>(f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    f(&mut g)
}

pub fn task_loss_value(pred: &Matrix, labels: &[f64], task: Task) -> Result<f64> {
    with_graph(|g| {
        let p = g.constant(pred.clone());
        let l = task_loss(g, p, labels, task)?;
        Ok(g.scalar(l))
    })
}

pub fn modality_loss_value(probs: &Matrix, modality: Modality) -> Result<f64> {
    with_graph(|g| {
        let p = g.constant(probs.clone());
        let l = modality_loss(g, p, modality)?;
        Ok(g.scalar(l))
    })
}

/// Returns the loss and the degenerate-batch flag.
pub fn ucorr_value(y_tilde: &Matrix, labels: &[f64], task: Task, mode: UcorrMode) -> Result<(f64, bool)> {
    with_graph(|g| {
        let p = g.constant(y_tilde.clone());
        let out = ucorr_loss(g, p, labels, task, mode)?;
        Ok((g.scalar(out.loss), out.degenerate))
    })
}

pub fn cmd_value(z: &Matrix, w: &Matrix, order: usize, lo: f64, hi: f64) -> Result<f64> {
    with_graph(|g| {
        let (zv, wv) = (g.constant(z.clone()), g.constant(w.clone()));
        let l = cmd(g, zv, wv, order, lo, hi)?;
        Ok(g.scalar(l))
    })
}

pub fn sim_loss_value(sets: [&Matrix; 3], order: usize, bounds: CmdBounds) -> Result<f64> {
    with_graph(|g| {
        let vars = sets.map(|s| g.constant(s.clone()));
        let l = sim_loss(g, vars, order, bounds)?;
        Ok(g.scalar(l))
    })
}

pub fn hsic_value(z: &Matrix, w: &Matrix, sigma: f64, kernel: HsicKernel) -> Result<f64> {
    with_graph(|g| {
        let (zv, wv) = (g.constant(z.clone()), g.constant(w.clone()));
        let l = hsic(g, zv, wv, sigma, kernel)?;
        Ok(g.scalar(l))
    })
}

pub fn inter_independence_value(sets: [&Matrix; 3], opts: &HsicOptions) -> Result<f64> {
    with_graph(|g| {
        let vars = sets.map(|s| g.constant(s.clone()));
        let l = inter_independence_loss(g, vars, opts)?;
        Ok(g.scalar(l))
    })
}

pub fn intra_exclusive_value(r_star: [&Matrix; 3], u_star: [&Matrix; 3], opts: &HsicOptions) -> Result<f64> {
    with_graph(|g| {
        let r = r_star.map(|s| g.constant(s.clone()));
        let u = u_star.map(|s| g.constant(s.clone()));
        let l = intra_exclusive_loss(g, r, u, opts)?;
        Ok(g.scalar(l))
    })
}

pub fn recon_loss_value(pred: &Matrix, target: &Matrix) -> Result<f64> {
    with_graph(|g| {
        let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
        let l = recon_loss(g, p, t)?;
        Ok(g.scalar(l))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;

    const REG: Task = Task::Regression;

    fn col(v: &[f64]) -> Matrix {
        Matrix::column_vector(v)
    }

    #[test]
    fn task_loss_examples() {
        assert_eq!(task_loss_value(&col(&[1.0, -1.0]), &[1.0, -1.0], REG).unwrap(), 0.0);
        assert_eq!(task_loss_value(&col(&[1.0, 1.0]), &[0.0, 0.0], REG).unwrap(), 1.0);
        let p = Matrix::from_rows(&[[0.5, 0.25, 0.25]]);
        let ce = task_loss_value(&p, &[0.0], Task::Classification { num_classes: 3 }).unwrap();
        assert!((ce - libm::log(2.0)).abs() < 1e-15);
        let off = Matrix::from_rows(&[[0.5, 0.5, 0.25]]);
        assert!(task_loss_value(&off, &[0.0], Task::Classification { num_classes: 3 }).is_err());
    }

    #[test]
    fn modality_loss_examples() {
        let perfect = Matrix::from_rows(&[[1.0, 0.0, 0.0]]);
        assert_eq!(modality_loss_value(&perfect, Modality::Text).unwrap(), 0.0);
        let third = 1.0 / 3.0;
        let uniform = Matrix::from_rows(&[[third, third, third]]);
        for m in Modality::ALL {
            assert!((modality_loss_value(&uniform, m).unwrap() - libm::log(3.0)).abs() < 1e-12);
        }
        let two = Matrix::from_rows(&[[0.5, 0.25, 0.25], [0.25, 0.5, 0.25]]);
        let expect = (libm::log(2.0) + libm::log(4.0)) / 2.0;
        assert!((modality_loss_value(&two, Modality::Text).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn ucorr_examples() {
        let p = col(&[1.0, 2.0, 3.0]);
        let (lit, d) = ucorr_value(&p, &[2.0, 4.0, 6.0], REG, UcorrMode::SignedCorrelation).unwrap();
        assert!(!d && (lit - 1.0).abs() < 1e-12);
        let (ind, _) = ucorr_value(&p, &[2.0, 4.0, 6.0], REG, UcorrMode::Independence).unwrap();
        assert!((ind - 1.0).abs() < 1e-12);
        let (lit, _) = ucorr_value(&p, &[3.0, 2.0, 1.0], REG, UcorrMode::SignedCorrelation).unwrap();
        assert!((lit + 1.0).abs() < 1e-12);
        let (ind, _) = ucorr_value(&p, &[3.0, 2.0, 1.0], REG, UcorrMode::Independence).unwrap();
        assert!((ind - 1.0).abs() < 1e-12);
        let (z, d) = ucorr_value(&col(&[4.0, 4.0, 4.0]), &[1.0, 2.0, 3.0], REG, UcorrMode::Independence).unwrap();
        assert!(d);
        assert_eq!(z, 0.0);
    }

    #[test]
    fn ucorr_classification_modes() {
        let task = Task::Classification { num_classes: 2 };
        let uniform = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]);
        let (kl, _) = ucorr_value(&uniform, &[0.0, 1.0], task, UcorrMode::Independence).unwrap();
        assert!(kl.abs() < 1e-15);
        let p = Matrix::from_rows(&[[0.8, 0.2], [0.4, 0.6]]);
        let (lit, _) = ucorr_value(&p, &[0.0, 1.0], task, UcorrMode::SignedCorrelation).unwrap();
        assert!((lit - (libm::log(0.8) + libm::log(0.6)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cmd_scalar_example() {
        let z = col(&[0.0, 1.0]);
        let w = col(&[1.0, 1.0]);
        assert_eq!(cmd_value(&z, &w, 2, 0.0, 1.0).unwrap(), 0.75);
        assert_eq!(cmd_value(&w, &z, 2, 0.0, 1.0).unwrap(), 0.75);
        assert_eq!(cmd_value(&z, &z, 5, 0.0, 1.0).unwrap(), 0.0);
        assert!(cmd_value(&Matrix::zeros(0, 1), &w, 2, 0.0, 1.0).is_err());
    }

    #[test]
    fn sim_loss_two_equal_sets() {
        let a = Matrix::from_rows(&[[0.1, -0.3], [0.5, 0.2], [-0.4, 0.0]]);
        let w = Matrix::from_rows(&[[0.7, 0.3], [-0.2, -0.6], [0.9, 0.1]]);
        let bounds = CmdBounds::Fixed { a: -1.0, b: 1.0 };
        let s = sim_loss_value([&a, &a, &w], 5, bounds).unwrap();
        let direct = cmd_value(&a, &w, 5, -1.0, 1.0).unwrap();
        assert!((s - 2.0 / 3.0 * direct).abs() < 1e-14);
        assert_eq!(sim_loss_value([&a, &a, &a], 5, bounds).unwrap(), 0.0);
        let perm = sim_loss_value([&w, &a, &a], 5, bounds).unwrap();
        assert!((perm - s).abs() < 1e-14);
    }

    #[test]
    fn hsic_two_sample_closed_form() {
        // RBF with sigma = 1: c = exp(-|z1 - z2|^2 / 2)
        let z = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]);
        let w = Matrix::from_rows(&[[0.5], [-0.5]]);
        let c = libm::exp(-1.0);
        let e = libm::exp(-0.5);
        let h = hsic_value(&z, &w, 1.0, HsicKernel::Rbf).unwrap();
        assert!((h - (1.0 - c) * (1.0 - e)).abs() < 1e-10);
        let h2 = hsic_value(&w, &z, 1.0, HsicKernel::Rbf).unwrap();
        assert!((h - h2).abs() < 1e-10);
    }

    #[test]
    fn hsic_constant_kernel_is_zero() {
        let z = Matrix::filled(4, 3, 0.4);
        let w = Matrix::from_rows(&[[0.1], [0.7], [-0.3], [0.2]]);
        for kernel in [HsicKernel::Rbf, HsicKernel::NormProduct] {
            assert!(hsic_value(&z, &w, 1.0, kernel).unwrap().abs() < 1e-10);
        }
        assert!(hsic_value(&z, &Matrix::zeros(3, 1), 1.0, HsicKernel::Rbf).is_err());
    }

    #[test]
    fn intra_matches_direct_hsic() {
        let r = Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.1], [0.0, 0.5]]);
        let u = Matrix::from_rows(&[[0.4, 0.0], [-0.2, 0.1], [0.6, 0.3]]);
        let opts = HsicOptions::fixed(1.0, HsicKernel::Rbf);
        let all = intra_exclusive_value([&r, &r, &r], [&u, &u, &u], &opts).unwrap();
        let direct = hsic_value(&r, &u, 1.0, HsicKernel::Rbf).unwrap();
        assert!((all - direct).abs() < 1e-14);
        let inter = inter_independence_value([&r, &r, &r], &opts).unwrap();
        assert!((inter - hsic_value(&r, &r, 1.0, HsicKernel::Rbf).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn median_bandwidth_is_scale_invariant() {
        let z = Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.1], [0.0, 0.5], [0.7, 0.4]]);
        let w = Matrix::from_rows(&[[0.4], [-0.2], [0.6], [0.1]]);
        let opts = HsicOptions { sigma: 1.0, kernel: HsicKernel::Rbf, bandwidth: HsicBandwidth::Median };
        let base = with_graph(|g| {
            let (a, b) = (g.constant(z.clone()), g.constant(w.clone()));
            let h = hsic_with(g, a, b, &opts)?;
            Ok(g.scalar(h))
        })
        .unwrap();
        let scaled = with_graph(|g| {
            let (a, b) = (g.constant(z.scale(0.01)), g.constant(w.scale(30.0)));
            let h = hsic_with(g, a, b, &opts)?;
            Ok(g.scalar(h))
        })
        .unwrap();
        assert!((base - scaled).abs() < 1e-12, "{base} vs {scaled}");
        // odd and even pair counts
        assert_eq!(median_kernel_argument(&Matrix::column_vector(&[0.0, 1.0, 3.0]), HsicKernel::Rbf), 4.0);
        assert_eq!(median_kernel_argument(&Matrix::column_vector(&[0.0, 1.0]), HsicKernel::Rbf), 1.0);
    }

    #[test]
    fn recon_examples() {
        let p = Matrix::row_vector(&[1.0, 1.0, 1.0]);
        let t = Matrix::zeros(1, 3);
        assert_eq!(recon_loss_value(&p, &t).unwrap(), 3.0);
        assert_eq!(recon_loss_value(&p, &p).unwrap(), 0.0);
        assert!(recon_loss_value(&p, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let zero = total_loss(LossComponents::default(), &LossWeights::MOSI).unwrap();
        assert_eq!(zero.total, 0.0);
        let ones = LossComponents::from_values([1.0; 7]);
        let r = total_loss(ones, &LossWeights::MOSI).unwrap();
        assert!((r.total - 4.15).abs() < 1e-12);
        let doubled = LossWeights { task: 2.0, ..LossWeights::MOSI };
        let c = LossComponents { task: 0.7, ..ones };
        let d = total_loss(c, &doubled).unwrap().total - total_loss(c, &LossWeights::MOSI).unwrap().total;
        assert!((d - 0.7).abs() < 1e-12);
        let bad = LossComponents { sim: f64::NAN, ..ones };
        let err = total_loss(bad, &LossWeights::MOSI).unwrap_err();
        assert!(alloc::format!("{err}").contains("sim"));
    }

    #[test]
    fn loss_gradients() {
        let z = Matrix::from_rows(&[[0.1, -0.3], [0.5, 0.2], [-0.4, 0.6], [0.3, 0.1]]);
        let w = Matrix::from_rows(&[[0.7, 0.3], [-0.2, -0.6], [0.9, 0.1], [0.0, 0.4]]);
        let err = check_inputs(&[z.clone(), w.clone()], |g, v| cmd(g, v[0], v[1], 5, -1.0, 1.0).unwrap());
        assert!(err < 1e-4, "cmd {err}");
        for kernel in [HsicKernel::Rbf, HsicKernel::NormProduct] {
            let err = check_inputs(&[z.clone(), w.clone()], |g, v| hsic(g, v[0], v[1], 1.0, kernel).unwrap());
            assert!(err < 1e-4, "hsic {kernel:?} {err}");
        }
        let labels = [0.5, -1.0, 2.0, 0.1];
        let p = col(&[0.2, -0.4, 0.9, 0.3]);
        for mode in [UcorrMode::Independence, UcorrMode::SignedCorrelation] {
            let err = check_inputs(&[p.clone()], |g, v| ucorr_loss(g, v[0], &labels, REG, mode).unwrap().loss);
            assert!(err < 1e-4, "ucorr {mode:?} {err}");
        }
        let err = check_inputs(&[p.clone()], |g, v| task_loss(g, v[0], &labels, REG).unwrap());
        assert!(err < 1e-4);
        let err = check_inputs(&[z.clone(), w.clone()], |g, v| recon_loss(g, v[0], v[1]).unwrap());
        assert!(err < 1e-4);
        let logits = Matrix::from_rows(&[[0.2, -0.1, 0.4], [1.0, 0.3, -0.5], [0.0, 0.1, 0.2], [-0.3, 0.8, 0.1]]);
        let err = check_inputs(&[logits.clone()], |g, v| {
            let p = g.softmax_rows(v[0]);
            modality_loss(g, p, Modality::Audio).unwrap()
        });
        assert!(err < 1e-4);
        let cls = Task::Classification { num_classes: 3 };
        for mode in [UcorrMode::Independence, UcorrMode::SignedCorrelation] {
            let err = check_inputs(&[logits.clone()], |g, v| {
                let p = g.softmax_rows(v[0]);
                ucorr_loss(g, p, &[0.0, 2.0, 1.0, 1.0], cls, mode).unwrap().loss
            });
            assert!(err < 1e-4, "ucorr cls {mode:?} {err}");
        }
    }
}
