//! Anchor-based interest compression followed by target-SID probing.
//!
//! Per user: `K` learnable anchors cross-attend over the behavior sequence;
//! each attended row goes through its own feed-forward block with a
//! residual and layer norm, giving the compressed anchors `P`. Per target
//! SID: the SID embedding attends over the raw behaviors (`e_global`), a
//! gate computed from `e_global` masks the SID embedding, and the masked
//! query attends over `P` (`e_local`). `[e_global; e_local]` is the
//! cacheable representation; a light target-item attention over those two
//! rows is the only part that needs the candidate item.

use super::init::Init;
use super::registry::{attend, ForwardTrace, SequenceSummarizer, Summary, TargetContext, UserContext, UserState};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{OrthoMode, ParamId, Real, Tape, Var};

struct Projections {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

impl Projections {
    fn new<T: Real>(init: &mut Init<T>, prefix: &str, q_in: usize, d: usize) -> Self {
        Self {
            wq: init.xavier(format!("{prefix}.wq"), q_in, d),
            wk: init.xavier(format!("{prefix}.wk"), d, d),
            wv: init.xavier(format!("{prefix}.wv"), d, d),
        }
    }
}

struct AnchorFfn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    gain: ParamId,
    bias: ParamId,
}

pub struct Uxsid {
    d: usize,
    k: usize,
    ortho_mode: OrthoMode,
    anchors: ParamId,
    iaic: Projections,
    ffn: Vec<AnchorFfn>,
    probe_global: Projections,
    gate: [ParamId; 4],
    probe_local: Projections,
    online: Projections,
}

// Layout of `UserState::vars`.
const P: usize = 0;
const GLOBAL_KEYS: usize = 1;
const GLOBAL_VALUES: usize = 2;
const LOCAL_KEYS: usize = 3;
const LOCAL_VALUES: usize = 4;

impl Uxsid {
    pub fn new<T: Real>(cfg: &ModelConfig, init: &mut Init<T>) -> Result<Self> {
        let (d, k) = (cfg.d, cfg.k_anchors);
        if k == 0 || cfg.d_ff == 0 || cfg.d_g == 0 {
            return Err(Error::InvalidArgument("K, d_ff and d_g must be positive".into()));
        }
        let std = 1.0 / (d as f64).sqrt();
        let anchors = init.normal("uxsid.anchors", k, d, std);
        let iaic = Projections::new(init, "uxsid.iaic", d, d);
        let ffn = (0..k)
            .map(|i| AnchorFfn {
                w1: init.xavier(format!("uxsid.pffn.{i}.w1"), d, cfg.d_ff),
                b1: init.constant(format!("uxsid.pffn.{i}.b1"), 1, cfg.d_ff, 0.0),
                w2: init.xavier(format!("uxsid.pffn.{i}.w2"), cfg.d_ff, d),
                b2: init.constant(format!("uxsid.pffn.{i}.b2"), 1, d, 0.0),
                gain: init.constant(format!("uxsid.pffn.{i}.ln_gain"), 1, d, 1.0),
                bias: init.constant(format!("uxsid.pffn.{i}.ln_bias"), 1, d, 0.0),
            })
            .collect();
        let probe_global = Projections::new(init, "uxsid.probe_global", d, d);
        let gate = [
            init.xavier("uxsid.gate.w1", d, cfg.d_g),
            init.constant("uxsid.gate.b1", 1, cfg.d_g, 0.0),
            init.xavier("uxsid.gate.w2", cfg.d_g, d),
            init.constant("uxsid.gate.b2", 1, d, 0.0),
        ];
        let probe_local = Projections::new(init, "uxsid.probe_local", d, d);
        let online = Projections::new(init, "uxsid.online", 2 * d, d);
        Ok(Self { d, k, ortho_mode: cfg.ortho_mode, anchors, iaic, ffn, probe_global, gate, probe_local, online })
    }

    /// Anchor cross-attention plus per-anchor feed-forward: `K x d`.
    pub fn compress<T: Real>(&self, tape: &mut Tape<'_, T>, behaviors: Var) -> Var {
        let q_anchor = tape.param(self.anchors);
        let wq = tape.param(self.iaic.wq);
        let q = tape.matmul(q_anchor, wq);
        let wk = tape.param(self.iaic.wk);
        let keys = tape.matmul(behaviors, wk);
        let wv = tape.param(self.iaic.wv);
        let values = tape.matmul(behaviors, wv);
        let (h, _) = attend(tape, q, keys, values, self.d);

        let rows: Vec<Var> = (0..self.k).map(|i| self.anchor_ffn(tape, h, i)).collect();
        tape.concat_rows(&rows)
    }

    fn anchor_ffn<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var, i: usize) -> Var {
        let f = &self.ffn[i];
        let hk = tape.rows(h, i, 1);
        let w1 = tape.param(f.w1);
        let b1 = tape.param(f.b1);
        let z = tape.matmul(hk, w1);
        let z = tape.add_row(z, b1);
        let z = tape.sigmoid(z);
        let w2 = tape.param(f.w2);
        let b2 = tape.param(f.b2);
        let z = tape.matmul(z, w2);
        let z = tape.add_row(z, b2);
        let res = tape.add(hk, z);
        let gain = tape.param(f.gain);
        let bias = tape.param(f.bias);
        tape.layer_norm_rows(res, gain, bias)
    }

    /// `σ(GatedNet(e_global))` with a sigmoid hidden layer.
    fn gate<T: Real>(&self, tape: &mut Tape<'_, T>, e_global: Var) -> Var {
        let [w1, b1, w2, b2] = self.gate.map(|p| tape.param(p));
        let h = tape.matmul(e_global, w1);
        let h = tape.add_row(h, b1);
        let h = tape.sigmoid(h);
        let o = tape.matmul(h, w2);
        let o = tape.add_row(o, b2);
        tape.sigmoid(o)
    }

    /// Explicit probe of the raw behaviors with the SID embedding.
    pub fn explicit_probe<T: Real>(&self, tape: &mut Tape<'_, T>, state: &UserState, sid_emb: Var) -> (Var, Var) {
        let wq = tape.param(self.probe_global.wq);
        let q = tape.matmul(sid_emb, wq);
        attend(tape, q, state.vars[GLOBAL_KEYS], state.vars[GLOBAL_VALUES], self.d)
    }

    /// Gated probe of the compressed anchors; returns `(e_local, scores,
    /// gate)`.
    pub fn gated_latent_probe<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        state: &UserState,
        sid_emb: Var,
        e_global: Var,
    ) -> (Var, Var, Var) {
        let g = self.gate(tape, e_global);
        let q_ref = tape.mul(sid_emb, g);
        let wq = tape.param(self.probe_local.wq);
        let q = tape.matmul(q_ref, wq);
        let (e_local, scores) = attend(tape, q, state.vars[LOCAL_KEYS], state.vars[LOCAL_VALUES], self.d);
        (e_local, scores, g)
    }
}

impl<T: Real> SequenceSummarizer<T> for Uxsid {
    fn name(&self) -> &'static str {
        "uxsid"
    }

    /// `e_global`, `e_local` and the online attention output.
    fn output_width(&self) -> usize {
        3 * self.d
    }

    fn encode_user(&self, tape: &mut Tape<'_, T>, user: &UserContext<'_>) -> Result<UserState> {
        let p = self.compress(tape, user.behaviors);
        let wk = tape.param(self.probe_global.wk);
        let gk = tape.matmul(user.behaviors, wk);
        let wv = tape.param(self.probe_global.wv);
        let gv = tape.matmul(user.behaviors, wv);
        let wk = tape.param(self.probe_local.wk);
        let lk = tape.matmul(p, wk);
        let wv = tape.param(self.probe_local.wv);
        let lv = tape.matmul(p, wv);
        Ok(UserState { vars: vec![p, gk, gv, lk, lv] })
    }

    fn summarize(
        &self,
        tape: &mut Tape<'_, T>,
        _user: &UserContext<'_>,
        state: &UserState,
        target: &TargetContext,
    ) -> Result<Summary<T>> {
        let (cached, trace) = SequenceSummarizer::<T>::cache_embed(self, tape, state, target.sid_emb)?
            .expect("uxsid always caches");
        let online = SequenceSummarizer::<T>::online(self, tape, cached, target.query)?.expect("uxsid has an online stage");
        let e_global = tape.rows(cached, 0, 1);
        let e_local = tape.rows(cached, 1, 1);
        let out = tape.concat_cols(&[e_global, e_local, online]);
        Ok(Summary { out, cached: Some(cached), trace: Some(trace) })
    }

    fn aux_loss(&self, tape: &mut Tape<'_, T>, state: &UserState) -> Result<Option<Var>> {
        Ok(Some(tape.ortho(state.vars[P], self.ortho_mode)?))
    }

    fn cache_embed(&self, tape: &mut Tape<'_, T>, state: &UserState, sid_emb: Var) -> Result<Option<(Var, ForwardTrace<T>)>> {
        let (e_global, global_scores) = self.explicit_probe(tape, state, sid_emb);
        let (e_local, local_scores, _) = self.gated_latent_probe(tape, state, sid_emb, e_global);
        let cached = tape.concat_rows(&[e_global, e_local]);
        let trace = ForwardTrace {
            global_scores: tape.value(global_scores).data().to_vec(),
            local_scores: tape.value(local_scores).data().to_vec(),
            e_global: tape.value(e_global).data().to_vec(),
            e_local: tape.value(e_local).data().to_vec(),
            anchors: tape.value(state.vars[P]).clone(),
        };
        Ok(Some((cached, trace)))
    }

    fn online(&self, tape: &mut Tape<'_, T>, cached: Var, query: Var) -> Result<Option<Var>> {
        let wq = tape.param(self.online.wq);
        let q = tape.matmul(query, wq);
        let wk = tape.param(self.online.wk);
        let keys = tape.matmul(cached, wk);
        let wv = tape.param(self.online.wv);
        let values = tape.matmul(cached, wv);
        let (out, _) = attend(tape, q, keys, values, self.d);
        Ok(Some(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, k: usize) -> (ParamStore<f64>, Uxsid) {
        let cfg = ModelConfig { d, k_anchors: k, d_ff: 2 * d, d_g: d, ..Default::default() };
        let mut ps = ParamStore::new();
        let u = Uxsid::new(&cfg, &mut Init::new(&mut ps, 3)).unwrap();
        (ps, u)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn permuted(m: &Matrix<f64>, perm: &[usize]) -> Matrix<f64> {
        Matrix::from_rows(&perm.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn encode(ps: &ParamStore<f64>, u: &Uxsid, e: &Matrix<f64>, c: &[f64]) -> (Matrix<f64>, ForwardTrace<f64>) {
        let mut t = Tape::new(ps);
        let b = t.input(e.clone());
        let ctx_items: Vec<usize> = (0..e.rows()).collect();
        let feats = crate::model::ItemFeatures { sid: vec![], category: vec![] };
        let ctx = UserContext { items: &ctx_items, behaviors: b, features: &feats };
        let state = SequenceSummarizer::<f64>::encode_user(u, &mut t, &ctx).unwrap();
        let s = t.input(Matrix::row_vector(c.to_vec()));
        let (cached, trace) = SequenceSummarizer::<f64>::cache_embed(u, &mut t, &state, s).unwrap().unwrap();
        (t.value(cached).clone(), trace)
    }

    #[test]
    fn compressed_shape_is_independent_of_length() {
        let (ps, u) = setup(4, 3);
        for l in [1, 7, 500] {
            let (cached, trace) = encode(&ps, &u, &random(l, 4, l as u64), &[0.1, 0.2, 0.3, 0.4]);
            assert_eq!(trace.anchors.shape(), (3, 4));
            assert_eq!(cached.shape(), (2, 4));
            assert_eq!(trace.global_scores.len(), l);
            assert_eq!(trace.local_scores.len(), 3);
            assert!((trace.global_scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((trace.local_scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_behaviors_leaves_anchors_and_global_probe_unchanged() {
        let (ps, u) = setup(6, 4);
        let e = random(9, 6, 1);
        let perm = [3, 8, 0, 5, 1, 7, 2, 6, 4];
        let c = [0.5, -0.2, 0.1, 0.9, -0.4, 0.3];
        let (a, ta) = encode(&ps, &u, &e, &c);
        let (b, tb) = encode(&ps, &u, &permuted(&e, &perm), &c);
        assert!(max_diff(a.data(), b.data()) <= 1e-5);
        assert!(max_diff(ta.anchors.data(), tb.anchors.data()) <= 1e-5);
        for (j, &i) in perm.iter().enumerate() {
            assert!((tb.global_scores[j] - ta.global_scores[i]).abs() <= 1e-5);
        }
    }

    #[test]
    fn single_behavior_gets_all_attention() {
        let (ps, u) = setup(4, 3);
        let e = random(1, 4, 2);
        let (_, trace) = encode(&ps, &u, &e, &[0.3, 0.1, -0.2, 0.5]);
        assert_eq!(trace.global_scores, vec![1.0]);
        let expected = e.matmul(ps.value(u.probe_global.wv)).unwrap();
        assert!(max_diff(&trace.e_global, expected.data()) < 1e-12);

        // Every anchor attends to the lone behavior, so all pre-FFN rows agree.
        let mut t = Tape::new(&ps);
        let b = t.input(e.clone());
        let q = t.param(u.anchors);
        let wq = t.param(u.iaic.wq);
        let q = t.matmul(q, wq);
        let wk = t.param(u.iaic.wk);
        let k = t.matmul(b, wk);
        let wv = t.param(u.iaic.wv);
        let v = t.matmul(b, wv);
        let (h, _) = attend(&mut t, q, k, v, 4);
        let ev = e.matmul(ps.value(u.iaic.wv)).unwrap();
        for r in 0..3 {
            assert!(max_diff(t.value(h).row(r), ev.row(0)) < 1e-12);
        }
    }

    #[test]
    fn identical_behaviors_get_uniform_scores() {
        let (ps, u) = setup(4, 2);
        let row = random(1, 4, 5);
        let e = permuted(&row, &[0, 0, 0, 0, 0]);
        let (_, trace) = encode(&ps, &u, &e, &[1.0, -1.0, 0.5, 0.2]);
        assert!(trace.global_scores.iter().all(|&s| (s - 0.2).abs() < 1e-12));
    }

    #[test]
    fn anchor_ffn_rows_are_independent() {
        let (ps, u) = setup(4, 3);
        let h = random(3, 4, 9);
        let mut h2 = h.clone();
        h2.row_mut(0).iter_mut().for_each(|x| *x += 0.7);
        h2.row_mut(2).iter_mut().for_each(|x| *x -= 0.3);
        let run = |h: &Matrix<f64>| {
            let mut t = Tape::new(&ps);
            let v = t.input(h.clone());
            let p1 = u.anchor_ffn(&mut t, v, 1);
            t.value(p1).clone()
        };
        assert_eq!(run(&h), run(&h2));
    }

    #[test]
    fn zero_query_spreads_evenly_over_anchors() {
        let (ps, u) = setup(4, 5);
        let (_, trace) = encode(&ps, &u, &random(12, 4, 4), &[0.0; 4]);
        assert!(trace.local_scores.iter().all(|&s| (s - 0.2).abs() < 1e-12));
        let pv = trace.anchors.matmul(ps.value(u.probe_local.wv)).unwrap();
        let mean: Vec<f64> = (0..4).map(|c| (0..5).map(|r| pv.get(r, c)).sum::<f64>() / 5.0).collect();
        assert!(max_diff(&trace.e_local, &mean) < 1e-12);
    }

    #[test]
    fn single_anchor_ignores_the_gate() {
        let (ps, u) = setup(4, 1);
        let (_, trace) = encode(&ps, &u, &random(6, 4, 6), &[0.4, 0.3, -0.9, 0.1]);
        let pv = trace.anchors.matmul(ps.value(u.probe_local.wv)).unwrap();
        assert!(max_diff(&trace.e_local, pv.data()) < 1e-12);
    }

    #[test]
    fn gate_stays_strictly_inside_unit_interval() {
        let (ps, u) = setup(4, 2);
        for scale in [0.0, 1.0, 50.0, -50.0] {
            let mut t = Tape::new(&ps);
            let e = t.input(random(1, 4, 7).map(|x| x * scale));
            let g = u.gate(&mut t, e);
            assert!(t.value(g).data().iter().all(|&x| x > 0.0 && x < 1.0), "{:?}", t.value(g));
        }
    }
}
