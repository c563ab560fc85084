use qcache::attention::{decode_step, prefill, reference, AttentionConfig, AttentionWeights, ModelDims};
use qcache::cache::{CacheLayout, QuantizedKvCache};
use qcache::quant::{estimate_packed_bits, QuantConfig};
use qcache::{Matrix, Matrix64};

use crate::data::{gaussian_matrix, rng};
use crate::report::Table;
use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationSpec {
    pub dims: ModelDims,
    pub attention: AttentionConfig,
    pub prefill_len: usize,
    pub decode_steps: usize,
    pub seed: u64,
    /// Compare every output with a double-precision full-attention run.
    pub shadow: bool,
    /// Largest allowed output error against the shadow.
    pub tolerance: Option<f64>,
}

/// Step 0 is the prefill; step `s` is the `s`-th decode token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub layout: CacheLayout,
    /// Max absolute output error against the shadow, if one was run.
    pub max_abs_err: Option<f64>,
    pub packed_bytes: usize,
    /// Packed bytes predicted by the size formula from the layout alone.
    pub estimated_packed_bytes: usize,
    pub window_bytes: usize,
    pub conserved: bool,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub rows: Vec<StepRow>,
    pub violations: Vec<String>,
    pub cache: QuantizedKvCache,
}

impl SimulationReport {
    pub fn max_abs_err(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.max_abs_err).reduce(f64::max)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(
            "Decode simulation",
            &[
                "step",
                "tokens",
                "max_abs_err",
                "sink",
                "k_middle",
                "v_middle",
                "k_recent",
                "v_recent",
                "packed_bytes",
                "estimated_packed_bytes",
                "window_bytes",
                "conserved",
            ],
        );
        for r in &self.rows {
            let l = r.layout;
            t.push(vec![
                r.step.to_string(),
                l.total_tokens.to_string(),
                r.max_abs_err.map(|e| format!("{e:e}")).unwrap_or_default(),
                l.sink.to_string(),
                l.k_middle.to_string(),
                l.v_middle.to_string(),
                l.k_recent.to_string(),
                l.v_recent.to_string(),
                r.packed_bytes.to_string(),
                r.estimated_packed_bytes.to_string(),
                r.window_bytes.to_string(),
                r.conserved.to_string(),
            ]);
        }
        t
    }
}

/// Random projections with entries `N(0, 1/d)` and inputs `N(0, 1)`, one
/// row per token.
pub fn random_model(dims: &ModelDims, tokens: usize, seed: u64) -> Result<(AttentionWeights, Matrix)> {
    let d = dims.d();
    let sigma = 1.0 / (d as f32).sqrt();
    let [w_q, w_k, w_v, w_o] = [1, 2, 3, 4].map(|s| gaussian_matrix(&mut rng(seed, s), d, d, sigma));
    let x = gaussian_matrix(&mut rng(seed, 5), tokens, d, 1.0);
    Ok((AttentionWeights::new(w_q, w_k, w_v, w_o)?, x))
}

/// Bytes the size formula predicts for one packed partition of `elements`
/// values: whole bytes for codes, scales and auxiliary words, one bit per
/// group for the mask rounded up to a byte.
pub fn estimated_bytes(cfg: &QuantConfig, elements: usize) -> usize {
    let bits = estimate_packed_bits(cfg, elements as u64);
    let groups = (elements / cfg.group_size()) as u64;
    let mask = if cfg.mode().has_mask() { groups } else { 0 };
    ((bits - mask) / 8 + mask.div_ceil(8)) as usize
}

/// Runs prefill and `decode_steps` decode tokens of a random model,
/// recording the cache layout and output error after each.
pub fn simulate_decode(spec: &SimulationSpec) -> Result<SimulationReport> {
    if spec.prefill_len == 0 {
        return Err(BenchError::usage("prefill length must be at least 1"));
    }
    let dims = &spec.dims;
    let cfg = &spec.attention;
    cfg.validate(dims)?;
    let n = spec.prefill_len;
    let (weights, x) = random_model(dims, n + spec.decode_steps, spec.seed)?;
    let shadow = if spec.shadow {
        Some(reference::mha(&x.cast::<f64>(), &weights.cast(), dims, &cfg.rope)?)
    } else {
        None
    };

    let pre = prefill(&x.slice_rows(0, n)?, &weights, dims, cfg)?;
    let mut cache = pre.cache;
    let mut tracker = Tracker::default();
    let err = shadow.as_ref().map(|s| max_err(pre.output.data(), s, 0..n));
    tracker.record(0, &cache, err, spec);

    for step in 1..=spec.decode_steps {
        let t = n + step - 1;
        let out = decode_step(x.row(t), &mut cache, &pre.weights, dims, cfg)?;
        let err = shadow.as_ref().map(|s| max_err(out.output.as_slice(), s, t..t + 1));
        tracker.record(step, &cache, err, spec);
    }
    Ok(SimulationReport {
        rows: tracker.rows,
        violations: tracker.violations,
        cache,
    })
}

fn max_err(got: &[f32], shadow: &Matrix64, rows: std::ops::Range<usize>) -> f64 {
    let d = shadow.cols();
    let want = &shadow.data()[rows.start * d..rows.end * d];
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
}

#[derive(Default)]
struct Tracker {
    rows: Vec<StepRow>,
    violations: Vec<String>,
    /// Sink contents captured when the sink first became full.
    sink: Option<(Vec<u8>, Vec<u8>)>,
}

impl Tracker {
    fn record(&mut self, step: usize, cache: &QuantizedKvCache, err: Option<f64>, spec: &SimulationSpec) {
        let l = cache.layout();
        let cfg = cache.config();
        let d = cache.width();
        let mut fail = |msg: String| self.violations.push(format!("step {step}: {msg}"));

        if let Err(e) = cache.check_invariants() {
            fail(e.to_string());
        }
        let conserved = l.sink + l.k_middle + l.k_recent == l.total_tokens
            && l.sink + l.v_middle + l.v_recent == l.total_tokens;
        if !conserved {
            fail(format!("tokens not conserved: {l:?}"));
        }
        let w = cfg.windows;
        let g = cfg.quant.group_size();
        if cfg.quantize && l.k_middle + l.v_middle > 0 {
            for (name, r) in [("key", l.k_recent), ("value", l.v_recent)] {
                if r < w.w_recent || r >= w.w_recent + g {
                    fail(format!("{name} recent window holds {r} tokens"));
                }
            }
        }
        if l.sink == w.w_sink {
            let now = (bytes(cache.key_views().sink), bytes(cache.value_views().sink));
            match &self.sink {
                Some(first) if *first != now => fail("sink contents changed".into()),
                Some(_) => {}
                None => self.sink = Some(now),
            }
        }
        let packed_bytes = cache.packed_bytes();
        let estimated_packed_bytes = if cfg.quantize {
            estimated_bytes(&cfg.quant, l.k_middle * d) + estimated_bytes(&cfg.quant, l.v_middle * d)
        } else {
            0
        };
        if packed_bytes != estimated_packed_bytes {
            fail(format!("{packed_bytes} packed bytes, formula gives {estimated_packed_bytes}"));
        }
        if let (Some(e), Some(tol)) = (err, spec.tolerance) {
            if !(e <= tol) {
                fail(format!("output error {e:e} exceeds {tol:e}"));
            }
        }
        self.rows.push(StepRow {
            step,
            layout: l,
            max_abs_err: err,
            packed_bytes,
            estimated_packed_bytes,
            window_bytes: cache.full_precision_bytes(),
            conserved,
        });
    }
}

fn bytes(m: &Matrix) -> Vec<u8> {
    m.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}
