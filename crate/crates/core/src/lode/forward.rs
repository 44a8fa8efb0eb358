use crate::diff::{Backend, CompGraph, Eager, EngineError, Tensor};
use crate::trajectory::{Window, CHANNELS};

use super::ode::rk4_step;
use super::{LatentState, Linear, LodeModel, Mlp, ModelError};

struct BoundLinear<V> {
    weight: V,
    bias: V,
}

struct BoundModel<V> {
    w_input: V,
    w_hidden: V,
    b_input: V,
    b_hidden: V,
    readout: BoundLinear<V>,
    dynamics: Vec<BoundLinear<V>>,
    decoder: Vec<BoundLinear<V>>,
    hidden: usize,
}

fn bind_linear<B: Backend>(b: &mut B, name: &str, l: &Linear) -> BoundLinear<B::Var> {
    BoundLinear {
        weight: b.parameter(&format!("{name}.weight"), &l.weight),
        bias: b.parameter(&format!("{name}.bias"), &l.bias),
    }
}

fn bind_mlp<B: Backend>(b: &mut B, prefix: &str, mlp: &Mlp) -> Vec<BoundLinear<B::Var>> {
    mlp.layers
        .iter()
        .enumerate()
        .map(|(i, l)| bind_linear(b, &format!("{prefix}.{i}"), l))
        .collect()
}

/// Names match [`LodeModel::named_params`].
fn bind<B: Backend>(b: &mut B, m: &LodeModel) -> BoundModel<B::Var> {
    let e = &m.encoder;
    BoundModel {
        w_input: b.parameter("encoder.w_input", &e.w_input),
        w_hidden: b.parameter("encoder.w_hidden", &e.w_hidden),
        b_input: b.parameter("encoder.b_input", &e.b_input),
        b_hidden: b.parameter("encoder.b_hidden", &e.b_hidden),
        readout: bind_linear(b, "encoder.readout", &e.readout),
        dynamics: bind_mlp(b, "dynamics", &m.dynamics),
        decoder: bind_mlp(b, "decoder", &m.decoder),
        hidden: e.hidden_dim(),
    }
}

fn linear<B: Backend>(b: &mut B, x: &B::Var, l: &BoundLinear<B::Var>) -> Result<B::Var, EngineError> {
    let xw = b.matmul(x, &l.weight)?;
    b.add(&xw, &l.bias)
}

fn mlp<B: Backend>(b: &mut B, x: &B::Var, layers: &[BoundLinear<B::Var>]) -> Result<B::Var, EngineError> {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        h = linear(b, &h, l)?;
        if i + 1 < layers.len() {
            h = b.tanh(&h)?;
        }
    }
    Ok(h)
}

fn gru_step<B: Backend>(b: &mut B, m: &BoundModel<B::Var>, x: &B::Var, h: &B::Var) -> Result<B::Var, EngineError> {
    let n = m.hidden;
    let gi = b.matmul(x, &m.w_input)?;
    let gi = b.add(&gi, &m.b_input)?;
    let gh = b.matmul(h, &m.w_hidden)?;
    let gh = b.add(&gh, &m.b_hidden)?;

    let (ri, rh) = (b.slice(&gi, 1, 0, n)?, b.slice(&gh, 1, 0, n)?);
    let r = b.add(&ri, &rh)?;
    let r = b.sigmoid(&r)?;
    let (ui, uh) = (b.slice(&gi, 1, n, 2 * n)?, b.slice(&gh, 1, n, 2 * n)?);
    let u = b.add(&ui, &uh)?;
    let u = b.sigmoid(&u)?;
    let (ci, ch) = (b.slice(&gi, 1, 2 * n, 3 * n)?, b.slice(&gh, 1, 2 * n, 3 * n)?);
    let gated = b.mul(&r, &ch)?;
    let c = b.add(&ci, &gated)?;
    let c = b.tanh(&c)?;

    // h' = (1 - u) * c + u * h = c + u * (h - c)
    let neg_c = b.scale(&c, -1.0)?;
    let diff = b.add(h, &neg_c)?;
    let step = b.mul(&u, &diff)?;
    b.add(&c, &step)
}

/// Encodes windows of equal width stacked as rows; `steps[s]` is the
/// `rows x 3` input at window position `s`.
fn encode_rows<B: Backend>(b: &mut B, m: &BoundModel<B::Var>, steps: &[Tensor]) -> Result<B::Var, EngineError> {
    let rows = steps[0].rows();
    let mut h = b.constant(Tensor::zeros(&[rows, m.hidden]));
    for x in steps {
        let x = b.constant(x.clone());
        h = gru_step(b, m, &x, &h)?;
    }
    linear(b, &h, &m.readout)
}

fn vector_field<B: Backend>(b: &mut B, m: &BoundModel<B::Var>, z: &B::Var, tau: f64) -> Result<B::Var, EngineError> {
    let rows = b.value(z).rows();
    let t = b.constant(Tensor::filled(&[rows, 1], tau));
    let input = b.concat(&[z, &t], 1)?;
    mlp(b, &input, &m.dynamics)
}

struct Integration<V> {
    /// State at every epoch boundary from the start epoch on, inclusive.
    states: Vec<V>,
    /// Sum over steps of the batch-summed squared midpoint slope norm.
    penalty_sum: Option<V>,
    steps: usize,
}

fn integrate_epochs<B: Backend>(
    b: &mut B,
    model: &LodeModel,
    m: &BoundModel<B::Var>,
    z0: &B::Var,
    start_epoch: usize,
    end_epoch: usize,
    with_penalty: bool,
) -> Result<Integration<B::Var>, ModelError> {
    let k = model.substeps;
    let h = model.step_size();
    let mut field = |b: &mut B, z: &B::Var, tau: f64| vector_field(b, m, z, tau);
    let mut states = vec![z0.clone()];
    let mut penalty: Option<B::Var> = None;
    let mut z = z0.clone();
    let first = start_epoch * k;
    let last = end_epoch * k;
    for step in first..last {
        let out = rk4_step(b, &mut field, &z, step, h).map_err(|e| match e {
            EngineError::NonFinite { .. } => ModelError::NonFiniteState { step },
            other => ModelError::Engine(other),
        })?;
        if with_penalty {
            let sq = b.mul(&out.mid_slope, &out.mid_slope)?;
            let s = b.sum(&sq)?;
            penalty = Some(match penalty {
                Some(acc) => b.add(&acc, &s)?,
                None => s,
            });
        }
        z = out.state;
        if (step + 1) % k == 0 {
            states.push(z.clone());
        }
    }
    Ok(Integration {
        states,
        penalty_sum: penalty,
        steps: last - first,
    })
}

fn window_steps(windows: &[&Window]) -> Vec<Tensor> {
    let width = windows[0].width();
    (0..width)
        .map(|s| {
            let data = windows.iter().flat_map(|w| w.rows[s]).collect();
            Tensor::matrix(windows.len(), CHANNELS, data)
        })
        .collect()
}

fn latent_of(t: &Tensor, row: usize) -> LatentState {
    LatentState(t.row_slice(row).to_vec())
}

fn stack(zs: &[LatentState]) -> Result<Tensor, ModelError> {
    let dim = zs[0].dim();
    if zs.iter().any(|z| z.dim() != dim) {
        return Err(ModelError::Invalid("latent states of differing dimension".into()));
    }
    Ok(Tensor::matrix(zs.len(), dim, zs.iter().flat_map(|z| z.0.iter().copied()).collect()))
}

pub fn encode(model: &LodeModel, w: &Window) -> Result<LatentState, ModelError> {
    let z = encode_batch(model, &[w])?;
    Ok(latent_of(&z, 0))
}

/// Encodes equal-width windows in one pass, one latent row per window.
pub(crate) fn encode_batch(model: &LodeModel, windows: &[&Window]) -> Result<Tensor, ModelError> {
    if windows.is_empty() || windows[0].width() == 0 {
        return Err(ModelError::Invalid("window width must be >= 1".into()));
    }
    if windows.iter().any(|w| w.width() != windows[0].width()) {
        return Err(ModelError::Invalid("batched windows must share a width".into()));
    }
    let mut b = Eager;
    let m = bind(&mut b, model);
    let z = encode_rows(&mut b, &m, &window_steps(windows))?;
    Ok((*z).clone())
}

/// States at every epoch boundary in `start_epoch..=end_epoch`, with
/// `z0` placed at `start_epoch`.
pub fn integrate(
    model: &LodeModel,
    z0: &LatentState,
    start_epoch: usize,
    end_epoch: usize,
) -> Result<Vec<LatentState>, ModelError> {
    let states = integrate_batch(model, &stack(std::slice::from_ref(z0))?, start_epoch, end_epoch)?;
    Ok(states.iter().map(|t| latent_of(t, 0)).collect())
}

/// Row-batched integration; one `rows x d_z` tensor per epoch boundary.
pub(crate) fn integrate_batch(
    model: &LodeModel,
    z0: &Tensor,
    start_epoch: usize,
    end_epoch: usize,
) -> Result<Vec<Tensor>, ModelError> {
    if end_epoch < start_epoch {
        return Err(ModelError::Invalid(format!(
            "end epoch {end_epoch} precedes start epoch {start_epoch}"
        )));
    }
    if !z0.is_finite() {
        return Err(ModelError::NonFiniteState { step: start_epoch * model.substeps });
    }
    let mut b = Eager;
    let m = bind(&mut b, model);
    let z = b.constant(z0.clone());
    let run = integrate_epochs(&mut b, model, &m, &z, start_epoch, end_epoch, false)?;
    Ok(run.states.into_iter().map(|t| (*t).clone()).collect())
}

/// Normalized `(loss, metric, lr)` row for every latent state.
pub fn decode(model: &LodeModel, zs: &[LatentState]) -> Result<Vec<[f64; CHANNELS]>, ModelError> {
    if zs.is_empty() {
        return Ok(Vec::new());
    }
    let out = decode_batch(model, &stack(zs)?)?;
    Ok(rows3(&out))
}

pub(crate) fn decode_batch(model: &LodeModel, z: &Tensor) -> Result<Tensor, ModelError> {
    if !z.is_finite() {
        return Err(ModelError::Invalid("non-finite latent passed to decoder".into()));
    }
    let mut b = Eager;
    let m = bind(&mut b, model);
    let zv = b.constant(z.clone());
    let out = mlp(&mut b, &zv, &m.decoder)?;
    Ok((*out).clone())
}

pub(crate) fn rows3(t: &Tensor) -> Vec<[f64; CHANNELS]> {
    (0..t.rows())
        .map(|r| {
            let s = t.row_slice(r);
            [s[0], s[1], s[2]]
        })
        .collect()
}

/// One training example: an encoder window and the full normalized run it
/// should reconstruct from epoch 0.
#[derive(Clone, Debug)]
pub struct LossItem {
    pub window: Window,
    pub target: Vec<[f64; CHANNELS]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    /// Mean squared vector-field norm over RK4 midpoints (unweighted).
    pub path_penalty: f64,
}

struct LossVars<V> {
    total: V,
    reconstruction: V,
    penalty: Option<V>,
}

fn build_loss<B: Backend>(b: &mut B, model: &LodeModel, batch: &[LossItem]) -> Result<LossVars<B::Var>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Invalid("loss batch is empty".into()));
    }
    if batch.iter().any(|it| it.target.is_empty() || it.window.width() == 0) {
        return Err(ModelError::Invalid("empty window or target".into()));
    }
    let m = bind(b, model);

    // Longest targets first, so the rows alive at each epoch form a prefix.
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&x, &y| batch[y].target.len().cmp(&batch[x].target.len()));

    let mut latents = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let width = batch[order[start]].window.width();
        let mut end = start + 1;
        while end < order.len() && batch[order[end]].window.width() == width {
            end += 1;
        }
        let windows: Vec<&Window> = order[start..end].iter().map(|&i| &batch[i].window).collect();
        latents.push(encode_rows(b, &m, &window_steps(&windows))?);
        start = end;
    }
    let z0 = if latents.len() == 1 {
        latents.pop().expect("one group")
    } else {
        let parts: Vec<&B::Var> = latents.iter().collect();
        b.concat(&parts, 0)?
    };

    let rows = order.len();
    let max_len = batch[order[0]].target.len();
    let with_penalty = model.lambda_path > 0.0;
    let run = integrate_epochs(b, model, &m, &z0, 0, max_len - 1, with_penalty)?;

    let mut pieces = Vec::with_capacity(max_len);
    let mut targets = Vec::new();
    for (e, z_e) in run.states.iter().enumerate() {
        let alive = order.iter().take_while(|&&i| batch[i].target.len() > e).count();
        pieces.push(if alive == rows { z_e.clone() } else { b.slice(z_e, 0, 0, alive)? });
        for &i in &order[..alive] {
            targets.extend_from_slice(&batch[i].target[e]);
        }
    }
    let gathered = if pieces.len() == 1 {
        pieces.pop().expect("one epoch")
    } else {
        let parts: Vec<&B::Var> = pieces.iter().collect();
        b.concat(&parts, 0)?
    };
    let decoded = mlp(b, &gathered, &m.decoder)?;
    let n_rows = targets.len() / CHANNELS;
    let target = b.constant(Tensor::matrix(n_rows, CHANNELS, targets));
    let reconstruction = b.mse(&decoded, &target)?;

    let penalty = match run.penalty_sum {
        Some(sum) if run.steps > 0 => Some(b.scale(&sum, 1.0 / (run.steps * rows) as f64)?),
        _ => None,
    };
    let total = match &penalty {
        Some(p) => {
            let weighted = b.scale(p, model.lambda_path)?;
            b.add(&reconstruction, &weighted)?
        }
        None => reconstruction.clone(),
    };
    Ok(LossVars {
        total,
        reconstruction,
        penalty,
    })
}

fn breakdown<B: Backend>(b: &B, vars: &LossVars<B::Var>) -> LossBreakdown {
    LossBreakdown {
        total: b.value(&vars.total).item(),
        reconstruction: b.value(&vars.reconstruction).item(),
        path_penalty: vars.penalty.as_ref().map_or(0.0, |p| b.value(p).item()),
    }
}

/// Reconstruction MSE plus `lambda_path` times the mean squared
/// vector-field norm along the integrated path.
pub fn model_loss(model: &LodeModel, batch: &[LossItem]) -> Result<LossBreakdown, ModelError> {
    let mut b = Eager;
    let vars = build_loss(&mut b, model, batch)?;
    Ok(breakdown(&b, &vars))
}

/// Loss and its gradient for every parameter tensor, in
/// [`LodeModel::named_params`] order.
pub fn model_loss_and_grad(model: &LodeModel, batch: &[LossItem]) -> Result<(LossBreakdown, Vec<Tensor>), ModelError> {
    let mut g = CompGraph::new();
    let vars = build_loss(&mut g, model, batch)?;
    let out = breakdown(&g, &vars);
    let grads = g.backward(vars.total, None)?;
    let ordered = model
        .named_params()
        .into_iter()
        .map(|(name, t)| grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((out, ordered))
}
