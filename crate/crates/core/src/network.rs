//! Layer composition: spiking encoder/recurrent stacks with a non-spiking
//! leaky-integrator readout, channel-split encoder groups, and an LSTM
//! baseline cell with the same step interface.
//!
//! Architectures are written as strings: `<n>D` dense spiking, `<n>R`
//! recurrent spiking, `<n>I` leaky-integrator readout, `<n>L` LSTM baseline,
//! separated by `-` or `,`. A bracketed group `[256D,256D]` runs its members
//! on equal (or declared) slices of the incoming channels and concatenates
//! their spikes; a leading bracket of bare sizes, e.g. `[1024,1024]`,
//! declares the expected input channel widths.

use crate::autodiff::{Matrix, NodeId, ParamId, ParamSet, TapeBuilder};
use crate::neuron::{
    leaky_integrator_step, spiking_step, LiquidTauParams, SpikingLayerParams, SpikingPrevNodes,
    SurrogateConfig, TauParams,
};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronKind {
    Lif,
    Asn,
    Ltc,
}

impl NeuronKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lif" => Ok(NeuronKind::Lif),
            "asn" => Ok(NeuronKind::Asn),
            "ltc" => Ok(NeuronKind::Ltc),
            other => Err(Error::config(format!("unknown neuron kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    DenseSpiking,
    RecurrentSpiking,
    LeakyReadout,
    LstmBaseline,
}

/// One parsed layer of an architecture string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub size: usize,
    pub neuron: NeuronKind,
}

/// Parsed architecture item: a single layer or a channel-split group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchItem {
    /// Declared input channel widths (leading bare-number bracket).
    InputChannels(Vec<usize>),
    Layer(LayerSpec),
    Group(Vec<LayerSpec>),
}

/// Parse an architecture string; `neuron` is attached to every spiking layer.
pub fn parse_arch(s: &str, neuron: NeuronKind) -> Result<Vec<ArchItem>> {
    let mut items = Vec::new();
    let mut rest = s.trim();
    if rest.is_empty() {
        return Err(Error::config("empty architecture string"));
    }
    let mut first = true;
    while !rest.is_empty() {
        let token;
        if let Some(stripped) = rest.strip_prefix('[') {
            let end = stripped
                .find(']')
                .ok_or_else(|| Error::config(format!("unclosed '[' in '{s}'")))?;
            token = &stripped[..end];
            rest = stripped[end + 1..].trim_start_matches(['-', ',']);
            let members: Vec<&str> = token.split(',').map(str::trim).collect();
            if members.iter().all(|m| m.chars().all(|c| c.is_ascii_digit())) {
                if !first {
                    return Err(Error::config(
                        "input channel declaration must come first".to_string(),
                    ));
                }
                let widths = members
                    .iter()
                    .map(|m| parse_size(m, s))
                    .collect::<Result<Vec<_>>>()?;
                items.push(ArchItem::InputChannels(widths));
            } else {
                let specs = members
                    .iter()
                    .map(|m| parse_layer_token(m, neuron, s))
                    .collect::<Result<Vec<_>>>()?;
                if specs.iter().any(|l| l.kind != LayerKind::DenseSpiking) {
                    return Err(Error::config(
                        "only dense spiking layers may appear in a group".to_string(),
                    ));
                }
                items.push(ArchItem::Group(specs));
            }
        } else {
            let end = rest.find(['-', ',']).unwrap_or(rest.len());
            token = &rest[..end];
            rest = rest[end..].trim_start_matches(['-', ',']);
            items.push(ArchItem::Layer(parse_layer_token(token, neuron, s)?));
        }
        first = false;
    }

    let layers: Vec<&LayerSpec> = items
        .iter()
        .flat_map(|i| match i {
            ArchItem::Layer(l) => vec![l],
            ArchItem::Group(g) => g.iter().collect(),
            ArchItem::InputChannels(_) => vec![],
        })
        .collect();
    if layers.is_empty() {
        return Err(Error::config(format!("no layers in '{s}'")));
    }
    let readouts = layers
        .iter()
        .filter(|l| l.kind == LayerKind::LeakyReadout)
        .count();
    let last_is_readout = matches!(
        items.last(),
        Some(ArchItem::Layer(LayerSpec {
            kind: LayerKind::LeakyReadout,
            ..
        }))
    );
    if readouts != 1 || !last_is_readout {
        return Err(Error::config(format!(
            "architecture '{s}' must end in exactly one readout layer (<n>I)"
        )));
    }
    Ok(items)
}

fn parse_size(tok: &str, whole: &str) -> Result<usize> {
    let n: usize = tok
        .parse()
        .map_err(|_| Error::config(format!("bad size '{tok}' in '{whole}'")))?;
    if n == 0 {
        return Err(Error::config(format!("zero-sized layer in '{whole}'")));
    }
    Ok(n)
}

fn parse_layer_token(tok: &str, neuron: NeuronKind, whole: &str) -> Result<LayerSpec> {
    let tok = tok.trim();
    if tok.len() < 2 {
        return Err(Error::config(format!("bad layer token '{tok}' in '{whole}'")));
    }
    let (num, suffix) = tok.split_at(tok.len() - 1);
    let size = parse_size(num, whole)?;
    let kind = match suffix {
        "D" => LayerKind::DenseSpiking,
        "R" => LayerKind::RecurrentSpiking,
        "I" => LayerKind::LeakyReadout,
        "L" => LayerKind::LstmBaseline,
        other => {
            return Err(Error::config(format!(
                "unknown layer suffix '{other}' in '{whole}'"
            )))
        }
    };
    Ok(LayerSpec { kind, size, neuron })
}

/// Initialization knobs for network construction.
#[derive(Debug, Clone, Copy)]
pub struct InitConfig {
    /// Constant init of the liquid tau_m map bias (pre-sigmoid).
    pub tau_m_bias: f64,
    /// Constant init of the liquid tau_adp map bias (pre-sigmoid).
    pub tau_adp_bias: f64,
    /// Gaussian init of ASN per-neuron pre-sigmoid membrane constants.
    pub asn_tau_m_raw: (f64, f64),
    /// Gaussian init of ASN per-neuron pre-sigmoid adaptation constants.
    pub asn_tau_adp_raw: (f64, f64),
    /// Fixed inverse membrane time constant of plain LIF layers.
    pub lif_tau_m_inv: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            tau_m_bias: 0.0,
            tau_adp_bias: 2.0,
            asn_tau_m_raw: (-3.0, 0.3),
            asn_tau_adp_raw: (4.0, 0.3),
            lif_tau_m_inv: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub arch: String,
    pub input_dim: usize,
    pub neuron: NeuronKind,
    pub surrogate: SurrogateConfig,
    /// Inverse time constant of the leaky readout, in (0, 1].
    pub readout_tau_inv: f64,
    pub init: InitConfig,
}

impl NetworkConfig {
    pub fn new(arch: impl Into<String>, input_dim: usize, neuron: NeuronKind) -> Self {
        NetworkConfig {
            arch: arch.into(),
            input_dim,
            neuron,
            surrogate: SurrogateConfig::default(),
            readout_tau_inv: 0.5,
            init: InitConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct SpikingSub {
    p: SpikingLayerParams,
    size: usize,
    slot0: usize,
    /// Input column window this member consumes.
    in_start: usize,
    in_len: usize,
}

#[derive(Debug, Clone)]
struct LstmParams {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
enum Layer {
    Spiking {
        p: SpikingLayerParams,
        slot0: usize,
    },
    Group(Vec<SpikingSub>),
    Lstm {
        p: LstmParams,
        slot0: usize,
    },
    Readout {
        w: ParamId,
        b: ParamId,
        tau_inv: f64,
        slot: usize,
    },
}

/// Values of all per-layer state, slot-ordered. Spiking layers own three
/// slots (u, s, b), the readout one (u), the LSTM two (h, c).
pub type NetworkState = Vec<Matrix>;

/// Output of one recorded network step.
pub struct StepOutput {
    /// Readout membrane potentials — the logits.
    pub pred: NodeId,
    /// New state value per slot, to be carried to the next step.
    pub state_nodes: Vec<NodeId>,
    /// Spike nodes of every spiking layer, for firing-rate accounting.
    pub spike_nodes: Vec<NodeId>,
}

/// A configured layer stack over a shared [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
    slots: usize,
    slot_sizes: Vec<usize>,
    surrogate: SurrogateConfig,
    param_ids: Vec<ParamId>,
}

impl Network {
    pub fn new(cfg: &NetworkConfig, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        cfg.surrogate.validate()?;
        if !(cfg.readout_tau_inv > 0.0 && cfg.readout_tau_inv <= 1.0) {
            return Err(Error::config("readout tau_inv must lie in (0, 1]"));
        }
        if cfg.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        let items = parse_arch(&cfg.arch, cfg.neuron)?;

        let mut layers = Vec::new();
        let mut slots = 0usize;
        let mut slot_sizes = Vec::new();
        let mut param_ids = Vec::new();
        let mut cur_dim = cfg.input_dim;
        let mut declared_channels: Option<Vec<usize>> = None;
        let mut idx = 0usize;

        for item in &items {
            match item {
                ArchItem::InputChannels(widths) => {
                    let total: usize = widths.iter().sum();
                    if total != cfg.input_dim {
                        return Err(Error::config(format!(
                            "declared input channels sum to {total}, input_dim is {}",
                            cfg.input_dim
                        )));
                    }
                    declared_channels = Some(widths.clone());
                }
                ArchItem::Layer(spec) => {
                    let name = format!("l{idx}");
                    idx += 1;
                    match spec.kind {
                        LayerKind::DenseSpiking | LayerKind::RecurrentSpiking => {
                            let recurrent = spec.kind == LayerKind::RecurrentSpiking;
                            let p = build_spiking_params(
                                params, &name, spec, cur_dim, recurrent, cfg, rng, &mut param_ids,
                            );
                            layers.push(Layer::Spiking { p, slot0: slots });
                            slot_sizes.extend([spec.size; 3]);
                            slots += 3;
                            cur_dim = spec.size;
                        }
                        LayerKind::LstmBaseline => {
                            let p = build_lstm_params(
                                params,
                                &name,
                                spec.size,
                                cur_dim,
                                rng,
                                &mut param_ids,
                            );
                            layers.push(Layer::Lstm { p, slot0: slots });
                            slot_sizes.extend([spec.size; 2]);
                            slots += 2;
                            cur_dim = spec.size;
                        }
                        LayerKind::LeakyReadout => {
                            let w = params.add(
                                format!("{name}.w"),
                                xavier(spec.size, cur_dim, rng),
                            );
                            let b = params.add(format!("{name}.b"), Matrix::zeros(1, spec.size));
                            param_ids.extend([w, b]);
                            layers.push(Layer::Readout {
                                w,
                                b,
                                tau_inv: cfg.readout_tau_inv,
                                slot: slots,
                            });
                            slot_sizes.push(spec.size);
                            slots += 1;
                            cur_dim = spec.size;
                        }
                    }
                }
                ArchItem::Group(specs) => {
                    let widths = match declared_channels.take() {
                        Some(w) => {
                            if w.len() != specs.len() {
                                return Err(Error::config(format!(
                                    "group of {} layers, but {} input channels declared",
                                    specs.len(),
                                    w.len()
                                )));
                            }
                            w
                        }
                        None => {
                            if cur_dim % specs.len() != 0 {
                                return Err(Error::config(format!(
                                    "input width {cur_dim} not divisible into {} group channels",
                                    specs.len()
                                )));
                            }
                            vec![cur_dim / specs.len(); specs.len()]
                        }
                    };
                    let mut parts = Vec::new();
                    let mut start = 0usize;
                    for (spec, width) in specs.iter().zip(&widths) {
                        let name = format!("l{idx}");
                        idx += 1;
                        let p = build_spiking_params(
                            params, &name, spec, *width, false, cfg, rng, &mut param_ids,
                        );
                        parts.push(SpikingSub {
                            p,
                            size: spec.size,
                            slot0: slots,
                            in_start: start,
                            in_len: *width,
                        });
                        slot_sizes.extend([spec.size; 3]);
                        slots += 3;
                        start += *width;
                    }
                    cur_dim = parts.iter().map(|p| p.size).sum();
                    layers.push(Layer::Group(parts));
                }
            }
        }

        Ok(Network {
            layers,
            input_dim: cfg.input_dim,
            output_dim: cur_dim,
            slots,
            slot_sizes,
            surrogate: cfg.surrogate,
            param_ids,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn slot_count(&self) -> usize {
        self.slots
    }

    pub fn surrogate(&self) -> &SurrogateConfig {
        &self.surrogate
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// Total trainable scalars; reported next to unit counts because
    /// equal-unit baselines generally differ in parameter count.
    pub fn param_scalar_count(&self, params: &ParamSet) -> usize {
        self.param_ids.iter().map(|id| params.value(*id).len()).sum()
    }

    /// Zeroed state for a batch: u = s = b = 0 at sequence start.
    pub fn init_state(&self, batch: usize) -> NetworkState {
        self.slot_sizes
            .iter()
            .map(|&n| Matrix::zeros(batch, n))
            .collect()
    }

    /// Record one step of every layer on the tape. `links` carries the
    /// previous tape's state-out node ids for flow-through chaining; `None`
    /// detaches the step from history.
    pub fn forward_step(
        &self,
        tb: &mut TapeBuilder,
        state: &NetworkState,
        links: Option<&[NodeId]>,
        x: &Matrix,
    ) -> Result<StepOutput> {
        if x.cols() != self.input_dim {
            return Err(Error::config(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        if state.len() != self.slots {
            return Err(Error::usage("state slot count mismatch"));
        }

        let bind = |tb: &mut TapeBuilder, slot: usize| -> NodeId {
            match links {
                Some(l) => tb.state_linked(slot, state[slot].clone(), l[slot]),
                None => tb.state_detached(slot, state[slot].clone()),
            }
        };

        let mut state_nodes = vec![usize::MAX; self.slots];
        let mut spike_nodes = Vec::new();
        let mut cur = tb.input(x.clone());

        for layer in &self.layers {
            match layer {
                Layer::Spiking { p, slot0, .. } => {
                    let prev = SpikingPrevNodes {
                        u: bind(tb, *slot0),
                        s: bind(tb, *slot0 + 1),
                        b: bind(tb, *slot0 + 2),
                    };
                    let out = spiking_step(tb, p, cur, &prev, &self.surrogate)?;
                    for (off, node) in [(0, out.u), (1, out.s), (2, out.b)] {
                        tb.mark_state_out(*slot0 + off, node);
                        state_nodes[*slot0 + off] = node;
                    }
                    spike_nodes.push(out.s);
                    cur = out.s;
                }
                Layer::Group(parts) => {
                    let mut outs = Vec::with_capacity(parts.len());
                    for part in parts {
                        let xin = tb.slice_cols(cur, part.in_start, part.in_len)?;
                        let prev = SpikingPrevNodes {
                            u: bind(tb, part.slot0),
                            s: bind(tb, part.slot0 + 1),
                            b: bind(tb, part.slot0 + 2),
                        };
                        let out = spiking_step(tb, &part.p, xin, &prev, &self.surrogate)?;
                        for (off, node) in [(0, out.u), (1, out.s), (2, out.b)] {
                            tb.mark_state_out(part.slot0 + off, node);
                            state_nodes[part.slot0 + off] = node;
                        }
                        spike_nodes.push(out.s);
                        outs.push(out.s);
                    }
                    let mut fused = outs[0];
                    for &o in &outs[1..] {
                        fused = tb.concat(fused, o)?;
                    }
                    cur = fused;
                }
                Layer::Lstm { p, slot0, .. } => {
                    let h_prev = bind(tb, *slot0);
                    let c_prev = bind(tb, *slot0 + 1);
                    let view = LstmParamsView::from(p);
                    let (h, c) = lstm_step(tb, &view, cur, h_prev, c_prev)?;
                    tb.mark_state_out(*slot0, h);
                    tb.mark_state_out(*slot0 + 1, c);
                    state_nodes[*slot0] = h;
                    state_nodes[*slot0 + 1] = c;
                    cur = h;
                }
                Layer::Readout { w, b, tau_inv, slot } => {
                    let u_prev = bind(tb, *slot);
                    let wn = tb.param(*w);
                    let bn = tb.param(*b);
                    let z = tb.affine(cur, wn, bn)?;
                    let u = leaky_integrator_step(tb, z, u_prev, *tau_inv)?;
                    tb.mark_state_out(*slot, u);
                    state_nodes[*slot] = u;
                    cur = u;
                }
            }
        }

        Ok(StepOutput {
            pred: cur,
            state_nodes,
            spike_nodes,
        })
    }
}

/// Standard LSTM cell step recorded on the tape with exact derivatives.
/// Gate order in the fused weight matrices is input, forget, cell, output.
pub fn lstm_step(
    tb: &mut TapeBuilder,
    p: &LstmParamsView,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let n = tb.value(h_prev).cols();
    let w_ih = tb.param(p.w_ih);
    let w_hh = tb.param(p.w_hh);
    let b = tb.param(p.b);
    let zx = tb.linear(x, w_ih)?;
    let zh = tb.linear(h_prev, w_hh)?;
    let zsum = tb.add(zx, zh)?;
    let z = tb.add_row(zsum, b)?;

    let zi = tb.slice_cols(z, 0, n)?;
    let zf = tb.slice_cols(z, n, n)?;
    let zg = tb.slice_cols(z, 2 * n, n)?;
    let zo = tb.slice_cols(z, 3 * n, n)?;

    let i = tb.sigmoid(zi);
    let f = tb.sigmoid(zf);
    let g = tb.tanh(zg);
    let o = tb.sigmoid(zo);

    let keep = tb.mul(f, c_prev)?;
    let write = tb.mul(i, g)?;
    let c = tb.add(keep, write)?;
    let ct = tb.tanh(c);
    let h = tb.mul(o, ct)?;
    Ok((h, c))
}

/// Public view of LSTM parameter handles (for direct cell-level use).
#[derive(Debug, Clone, Copy)]
pub struct LstmParamsView {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

impl From<&LstmParams> for LstmParamsView {
    fn from(p: &LstmParams) -> Self {
        LstmParamsView {
            w_ih: p.w_ih,
            w_hh: p.w_hh,
            b: p.b,
        }
    }
}

/// Mean spike count over all recorded spike matrices.
pub fn firing_rate(spikes: &[Matrix]) -> Result<f64> {
    let total: usize = spikes.iter().map(|m| m.len()).sum();
    if total == 0 {
        return Err(Error::usage("firing_rate over an empty spike record"));
    }
    let sum: f64 = spikes.iter().map(|m| m.as_slice().iter().sum::<f64>()).sum();
    Ok(sum / total as f64)
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

#[allow(clippy::too_many_arguments)]
fn build_spiking_params(
    params: &mut ParamSet,
    name: &str,
    spec: &LayerSpec,
    in_dim: usize,
    recurrent: bool,
    cfg: &NetworkConfig,
    rng: &mut impl Rng,
    param_ids: &mut Vec<ParamId>,
) -> SpikingLayerParams {
    let n = spec.size;
    let w_in = params.add(format!("{name}.w_in"), xavier(n, in_dim, rng));
    let b_in = params.add(format!("{name}.b_in"), Matrix::zeros(1, n));
    param_ids.extend([w_in, b_in]);
    let w_rec = recurrent.then(|| {
        let id = params.add(format!("{name}.w_rec"), xavier(n, n, rng));
        param_ids.push(id);
        id
    });
    let tau = match spec.neuron {
        NeuronKind::Ltc => {
            let w_tau_m = params.add(format!("{name}.w_tau_m"), xavier(n, in_dim + n, rng));
            let b_tau_m = params.add(
                format!("{name}.b_tau_m"),
                Matrix::filled(1, n, cfg.init.tau_m_bias),
            );
            let w_tau_adp = params.add(format!("{name}.w_tau_adp"), xavier(n, in_dim + n, rng));
            let b_tau_adp = params.add(
                format!("{name}.b_tau_adp"),
                Matrix::filled(1, n, cfg.init.tau_adp_bias),
            );
            param_ids.extend([w_tau_m, b_tau_m, w_tau_adp, b_tau_adp]);
            TauParams::Liquid(LiquidTauParams {
                w_tau_m,
                b_tau_m,
                w_tau_adp,
                b_tau_adp,
            })
        }
        NeuronKind::Asn => {
            let (m_mean, m_std) = cfg.init.asn_tau_m_raw;
            let (a_mean, a_std) = cfg.init.asn_tau_adp_raw;
            let nm = Normal::new(m_mean, m_std).expect("valid normal");
            let na = Normal::new(a_mean, a_std).expect("valid normal");
            let tau_m_raw = params.add(
                format!("{name}.tau_m_raw"),
                Matrix::from_fn(1, n, |_, _| nm.sample(rng)),
            );
            let tau_adp_raw = params.add(
                format!("{name}.tau_adp_raw"),
                Matrix::from_fn(1, n, |_, _| na.sample(rng)),
            );
            param_ids.extend([tau_m_raw, tau_adp_raw]);
            TauParams::PerNeuron {
                tau_m_raw,
                tau_adp_raw,
            }
        }
        NeuronKind::Lif => TauParams::Fixed {
            tau_m_inv: cfg.init.lif_tau_m_inv,
        },
    };
    SpikingLayerParams {
        w_in,
        b_in,
        w_rec,
        tau,
    }
}

fn build_lstm_params(
    params: &mut ParamSet,
    name: &str,
    n: usize,
    in_dim: usize,
    rng: &mut impl Rng,
    param_ids: &mut Vec<ParamId>,
) -> LstmParams {
    let w_ih = params.add(format!("{name}.w_ih"), xavier(4 * n, in_dim, rng));
    let w_hh = params.add(format!("{name}.w_hh"), xavier(4 * n, n, rng));
    // forget-gate bias starts at 1 so the cell retains by default
    let mut bias = Matrix::zeros(1, 4 * n);
    for c in n..2 * n {
        bias.set(0, c, 1.0);
    }
    let b = params.add(format!("{name}.b"), bias);
    param_ids.extend([w_ih, w_hh, b]);
    LstmParams { w_ih, w_hh, b }
}

impl Network {
    /// LSTM parameter views for direct cell access in tests.
    pub fn lstm_params(&self) -> Vec<LstmParamsView> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Lstm { p, .. } => Some(LstmParamsView::from(p)),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::StepTape;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn parses_plain_architectures() {
        let items = parse_arch("512R-10I", NeuronKind::Ltc).unwrap();
        assert_eq!(
            items,
            vec![
                ArchItem::Layer(LayerSpec {
                    kind: LayerKind::RecurrentSpiking,
                    size: 512,
                    neuron: NeuronKind::Ltc
                }),
                ArchItem::Layer(LayerSpec {
                    kind: LayerKind::LeakyReadout,
                    size: 10,
                    neuron: NeuronKind::Ltc
                }),
            ]
        );
        assert!(parse_arch("256D,256D,10I", NeuronKind::Ltc).is_ok());
        assert!(parse_arch("128L-1I", NeuronKind::Ltc).is_ok());
    }

    #[test]
    fn parses_channel_groups() {
        let items = parse_arch("[1024,1024]-[512D,512D]-512R-11I", NeuronKind::Ltc).unwrap();
        assert_eq!(items.len(), 4);
        assert!(matches!(&items[0], ArchItem::InputChannels(w) if w == &vec![1024, 1024]));
        assert!(matches!(&items[1], ArchItem::Group(g) if g.len() == 2));
    }

    #[test]
    fn rejects_malformed_architectures() {
        assert!(parse_arch("", NeuronKind::Ltc).is_err());
        assert!(parse_arch("512R", NeuronKind::Ltc).is_err()); // no readout
        assert!(parse_arch("10I-512R", NeuronKind::Ltc).is_err()); // readout not last
        assert!(parse_arch("512X-10I", NeuronKind::Ltc).is_err());
        assert!(parse_arch("0D-10I", NeuronKind::Ltc).is_err());
        assert!(parse_arch("512R-10I-2I", NeuronKind::Ltc).is_err());
    }

    #[test]
    fn zero_weights_zero_input_give_zero_prediction() {
        let mut rng = rng();
        let mut params = ParamSet::new();
        let cfg = NetworkConfig::new("4R-3I", 2, NeuronKind::Ltc);
        let net = Network::new(&cfg, &mut params, &mut rng).unwrap();
        for id in net.param_ids() {
            params.value_mut(*id).fill(0.0);
        }
        let state = net.init_state(2);
        let mut tape = StepTape::new(&params);
        let mut tb = TapeBuilder::new(&params, &mut tape);
        let out = net
            .forward_step(&mut tb, &state, None, &Matrix::zeros(2, 2))
            .unwrap();
        assert!(tape.value(out.pred).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_readout_reduces_to_leaky_integrator() {
        let mut rng = rng();
        let mut params = ParamSet::new();
        let mut cfg = NetworkConfig::new("1I", 1, NeuronKind::Ltc);
        cfg.readout_tau_inv = 0.1;
        let net = Network::new(&cfg, &mut params, &mut rng).unwrap();
        // identity affine: w = 1, b = 0
        params.value_mut(net.param_ids()[0]).fill(1.0);
        params.value_mut(net.param_ids()[1]).fill(0.0);

        let mut state = net.init_state(1);
        let mut expect = 0.0;
        for _ in 0..2 {
            let mut tape = StepTape::new(&params);
            let mut tb = TapeBuilder::new(&params, &mut tape);
            let out = net
                .forward_step(&mut tb, &state, None, &Matrix::filled(1, 1, 1.0))
                .unwrap();
            expect = crate::neuron::leaky_integrator_scalar(1.0, expect, 0.1);
            assert!((tape.value(out.pred).get(0, 0) - expect).abs() < 1e-15);
            state = out
                .state_nodes
                .iter()
                .map(|&n| tape.value(n).clone())
                .collect();
        }
        assert!((expect - 0.19).abs() < 1e-15);
    }

    #[test]
    fn readout_logits_are_real_valued_not_spikes() {
        let mut rng = rng();
        let mut params = ParamSet::new();
        let cfg = NetworkConfig::new("8R-4I", 3, NeuronKind::Ltc);
        let net = Network::new(&cfg, &mut params, &mut rng).unwrap();
        let mut state = net.init_state(2);
        let mut saw_non_binary = false;
        let mut r = rng.clone();
        for _ in 0..20 {
            use rand::Rng;
            let x = Matrix::from_fn(2, 3, |_, _| r.random_range(-1.0..2.0));
            let mut tape = StepTape::new(&params);
            let mut tb = TapeBuilder::new(&params, &mut tape);
            let out = net.forward_step(&mut tb, &state, None, &x).unwrap();
            for &v in tape.value(out.pred).as_slice() {
                assert!(v.is_finite());
                if v != 0.0 && v != 1.0 {
                    saw_non_binary = true;
                }
            }
            state = out
                .state_nodes
                .iter()
                .map(|&n| tape.value(n).clone())
                .collect();
        }
        assert!(saw_non_binary, "readout produced only 0/1 values");
    }

    #[test]
    fn lstm_with_saturated_gates_integrates_input() {
        let mut rng = rng();
        let mut params = ParamSet::new();
        let cfg = NetworkConfig::new("2L-2I", 2, NeuronKind::Ltc);
        let net = Network::new(&cfg, &mut params, &mut rng).unwrap();
        let lstm = net.lstm_params()[0];
        // zero weights, huge i/f/o biases, so c accumulates tanh(0) + ... = 0;
        // drive the cell input through w_ih on the g block instead.
        params.value_mut(lstm.w_ih).fill(0.0);
        params.value_mut(lstm.w_hh).fill(0.0);
        {
            let b = params.value_mut(lstm.b);
            for c in 0..2 {
                b.set(0, c, 50.0); // input gate open
                b.set(0, 2 + c, 50.0); // forget gate open
                b.set(0, 6 + c, 50.0); // output gate open
                b.set(0, 4 + c, 0.3); // constant cell candidate tanh(0.3)
            }
        }
        let mut state = net.init_state(1);
        let mut tape_val = 0.0;
        for step in 1..=3 {
            let mut tape = StepTape::new(&params);
            let mut tb = TapeBuilder::new(&params, &mut tape);
            let x = tb.input(Matrix::zeros(1, 2));
            let h_prev = tb.state_detached(0, state[0].clone());
            let c_prev = tb.state_detached(1, state[1].clone());
            let (h, c) = lstm_step(&mut tb, &lstm, x, h_prev, c_prev).unwrap();
            // cell integrates tanh(0.3) each step through saturated gates
            tape_val = tape.value(c).get(0, 0);
            let expect = step as f64 * (0.3f64).tanh();
            assert!(
                (tape_val - expect).abs() < 1e-6,
                "step {step}: {tape_val} vs {expect}"
            );
            state[0] = tape.value(h).clone();
            state[1] = tape.value(c).clone();
        }
        assert!(tape_val > 0.8);
    }

    #[test]
    fn lstm_zero_everything_outputs_zero() {
        let mut rng = rng();
        let mut params = ParamSet::new();
        let cfg = NetworkConfig::new("3L-1I", 2, NeuronKind::Ltc);
        let net = Network::new(&cfg, &mut params, &mut rng).unwrap();
        let lstm = net.lstm_params()[0];
        params.value_mut(lstm.w_ih).fill(0.0);
        params.value_mut(lstm.w_hh).fill(0.0);
        params.value_mut(lstm.b).fill(0.0);
        let mut tape = StepTape::new(&params);
        let mut tb = TapeBuilder::new(&params, &mut tape);
        let x = tb.input(Matrix::zeros(1, 2));
        let h0 = tb.state_detached(0, Matrix::zeros(1, 3));
        let c0 = tb.state_detached(1, Matrix::zeros(1, 3));
        let (h, _) = lstm_step(&mut tb, &lstm, x, h0, c0).unwrap();
        assert!(tape.value(h).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn firing_rate_extremes_and_empty_record() {
        assert_eq!(firing_rate(&[Matrix::zeros(4, 5)]).unwrap(), 0.0);
        assert_eq!(firing_rate(&[Matrix::filled(4, 5, 1.0)]).unwrap(), 1.0);
        assert!(firing_rate(&[]).is_err());
    }

    #[test]
    fn group_network_splits_channels() {
        let mut rng = rng();
        let mut params = ParamSet::new();
        let cfg = NetworkConfig::new("[4,4]-[3D,3D]-4R-2I", 8, NeuronKind::Ltc);
        let net = Network::new(&cfg, &mut params, &mut rng).unwrap();
        let state = net.init_state(1);
        let mut tape = StepTape::new(&params);
        let mut tb = TapeBuilder::new(&params, &mut tape);
        let out = net
            .forward_step(&mut tb, &state, None, &Matrix::filled(1, 8, 0.5))
            .unwrap();
        assert_eq!(tape.value(out.pred).cols(), 2);
        assert_eq!(out.spike_nodes.len(), 3);
    }
}
