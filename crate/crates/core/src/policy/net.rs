use std::rc::Rc;

use super::context::{rel_features, Item, SceneContext};
use super::{AttnSlices, MlpSlices, PolicyParams, Slice, MASKED_LOGIT, REL_FEATURES, ROW_FEATURES};
use crate::autodiff::{PairList, Tape, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::scene::{Category, Pose2};

/// Next-token logits, one row per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLogits<T> {
    pub logits: Vec<Vec<T>>,
}

/// Logits for the requested predictions of one category. `rows[i]` is the
/// position in the request list of row `i` of `var`.
#[derive(Clone, Debug)]
pub struct CategoryLogits {
    pub category: Category,
    pub var: Var,
    pub rows: Vec<usize>,
}

/// Temporal keys and values of rows already encoded, per layer.
struct TemporalCache<T> {
    items: Vec<Item<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T> TemporalCache<T> {
    fn empty(layers: usize) -> Self {
        Self {
            items: Vec::new(),
            k: (0..layers).map(|_| Vec::new()).collect(),
            v: (0..layers).map(|_| Vec::new()).collect(),
        }
    }
}

struct Encoded {
    x: Var,
    temporal_kv: Vec<(Var, Var)>,
}

enum KeySource {
    Temporal(Var, Var),
    Fixed(Var, Var),
    Own,
}

fn param<'p, T: Scalar>(tape: &mut Tape<'p, T>, s: &'p Slice) -> Var {
    tape.param(s.offset, s.rows, s.cols, &s.name)
}

fn linear<'p, T: Scalar>(tape: &mut Tape<'p, T>, x: Var, w: &'p Slice, b: &'p Slice) -> Var {
    let w = param(tape, w);
    let b = param(tape, b);
    let h = tape.matmul(x, w);
    tape.add_bias(h, b)
}

fn rel_mlp<'p, T: Scalar>(tape: &mut Tape<'p, T>, s: &'p MlpSlices, feats: Vec<T>) -> Var {
    let n = feats.len() / REL_FEATURES;
    let f = tape.constant(feats, n, REL_FEATURES);
    let h = linear(tape, f, &s.w1, &s.b1);
    let h = tape.silu(h);
    linear(tape, h, &s.w2, &s.b2)
}

#[allow(clippy::too_many_arguments)]
fn attention_block<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    s: &'p AttnSlices,
    x: Var,
    keys: KeySource,
    rel: Var,
    pairs: Rc<PairList>,
    heads: usize,
    name: &'p str,
) -> (Var, Option<(Var, Var)>) {
    let g = param(tape, &s.ln_g);
    let b = param(tape, &s.ln_b);
    let h = tape.layer_norm(x, g, b);
    let wq = param(tape, &s.wq);
    let q = tape.matmul(h, wq);
    let (k, v, own) = match keys {
        KeySource::Fixed(k, v) => (k, v, None),
        KeySource::Own | KeySource::Temporal(..) => {
            let wk = param(tape, &s.wk);
            let wv = param(tape, &s.wv);
            let kn = tape.matmul(h, wk);
            let vn = tape.matmul(h, wv);
            match keys {
                KeySource::Temporal(ck, cv) => {
                    let k = tape.concat_rows(ck, kn);
                    let v = tape.concat_rows(cv, vn);
                    (k, v, Some((kn, vn)))
                }
                _ => (kn, vn, None),
            }
        }
    };
    let o = tape.attention(q, k, v, rel, pairs, heads);
    let o = tape.named(o, name);
    let wo = param(tape, &s.wo);
    let bo = param(tape, &s.bo);
    let o = tape.matmul(o, wo);
    let o = tape.add_bias(o, bo);
    (tape.add(x, o), own)
}

/// Map keys and values per layer, from the scene's map points.
fn map_kv<'p, T: Scalar>(tape: &mut Tape<'p, T>, params: &'p PolicyParams<T>, ctx: &SceneContext<T>) -> Vec<(Var, Var)> {
    let lay = &params.layout;
    let feats: Vec<T> = ctx.map_points.iter().flat_map(|m| m.features).collect();
    let f = tape.constant(feats, ctx.map_points.len(), super::MAP_FEATURES);
    let e = linear(tape, f, &lay.map_w, &lay.map_b);
    let e = tape.silu(e);
    let e = tape.named(e, "map_embedding");
    lay.layers
        .iter()
        .map(|l| {
            let wk = param(tape, &l.map.wk);
            let wv = param(tape, &l.map.wv);
            (tape.matmul(e, wk), tape.matmul(e, wv))
        })
        .collect()
}

/// Encodes `items` (slot-major, slots after every cached slot) through all
/// layers, attending to cached temporal rows.
fn encode<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    params: &'p PolicyParams<T>,
    ctx: &SceneContext<T>,
    map: &[(Var, Var)],
    cache: &TemporalCache<T>,
    items: &[Item<T>],
) -> Result<Encoded> {
    let cfg = &params.config;
    let lay = &params.layout;
    let d = cfg.model_dim;
    let kk = cfg.vocab_size;
    let n = items.len();

    let mut idx = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * ROW_FEATURES);
    for it in items {
        let c = ctx.categories[it.agent];
        if it.token >= ctx.vocab_sizes[c.index()] {
            return Err(invalid(format!(
                "token id {} out of range for {} vocabulary",
                it.token,
                c.name()
            )));
        }
        idx.push(c.index() * kk + it.token);
        let mut f = [T::zero(); ROW_FEATURES];
        f[c.index()] = T::one();
        if it.agent == 0 {
            f[3] = T::one();
        }
        feats.extend_from_slice(&f);
    }
    let table = param(tape, &lay.tok_emb);
    let emb = tape.gather(table, idx);
    let f = tape.constant(feats, n, ROW_FEATURES);
    let lin = linear(tape, f, &lay.in_w, &lay.in_b);
    let mut x = tape.add(emb, lin);

    // Temporal pairs: same agent, slot <= own, cached rows first.
    let c = cache.items.len();
    let mut by_agent: Vec<Vec<(usize, usize, Pose2<T>)>> = vec![Vec::new(); ctx.num_agents()];
    for (row, it) in cache.items.iter().enumerate() {
        by_agent[it.agent].push((it.slot, row, it.pose));
    }
    for (row, it) in items.iter().enumerate() {
        by_agent[it.agent].push((it.slot, c + row, it.pose));
    }
    let mut tp = PairList::new();
    let mut tf = Vec::new();
    for it in items {
        let keys = by_agent[it.agent].iter().take_while(|k| k.0 <= it.slot);
        let mut ks = Vec::new();
        for &(slot, row, pose) in keys {
            ks.push(row);
            let gap = T::lit((it.slot - slot) as f64) * ctx.dt;
            tf.extend_from_slice(&rel_features(&it.pose, &pose, gap));
        }
        tp.push_query(ks);
    }

    let mut mp = PairList::new();
    let mut mf = Vec::new();
    for it in items {
        let ks = ctx.map_keys(&it.pose, cfg);
        for &k in &ks {
            mf.extend_from_slice(&rel_features(&it.pose, &ctx.map_points[k].pose, T::zero()));
        }
        mp.push_query(ks);
    }

    // Agent pairs: same slot, other agents within the neighbor radius.
    let r2 = T::lit(cfg.neighbor_radius * cfg.neighbor_radius);
    let mut ap = PairList::new();
    let mut af = Vec::new();
    for it in items {
        let mut ks = Vec::new();
        for (row, other) in items.iter().enumerate() {
            if other.slot == it.slot
                && other.agent != it.agent
                && (other.pose.position() - it.pose.position()).norm_sq() <= r2
            {
                ks.push(row);
                af.extend_from_slice(&rel_features(&it.pose, &other.pose, T::zero()));
            }
        }
        ap.push_query(ks);
    }

    let rel_t = rel_mlp(tape, &lay.rel[0], tf);
    let rel_m = rel_mlp(tape, &lay.rel[1], mf);
    let rel_a = rel_mlp(tape, &lay.rel[2], af);
    let (tp, mp, ap) = (Rc::new(tp), Rc::new(mp), Rc::new(ap));

    let heads = cfg.num_heads;
    let mut temporal_kv = Vec::with_capacity(lay.layers.len());
    for (l, ls) in lay.layers.iter().enumerate() {
        let ck = tape.constant(cache.k[l].clone(), c, d);
        let cv = tape.constant(cache.v[l].clone(), c, d);
        let (nx, own) = attention_block(
            tape,
            &ls.temporal,
            x,
            KeySource::Temporal(ck, cv),
            rel_t,
            tp.clone(),
            heads,
            "temporal_attention",
        );
        temporal_kv.push(own.expect("temporal block returns its keys"));
        let (mk, mv) = map[l];
        let (nx, _) = attention_block(tape, &ls.map, nx, KeySource::Fixed(mk, mv), rel_m, mp.clone(), heads, "map_attention");
        let (nx, _) = attention_block(tape, &ls.agent, nx, KeySource::Own, rel_a, ap.clone(), heads, "agent_attention");
        let g = param(tape, &ls.ffn_ln_g);
        let b = param(tape, &ls.ffn_ln_b);
        let h = tape.layer_norm(nx, g, b);
        let h = linear(tape, h, &ls.ffn_w1, &ls.ffn_b1);
        let h = tape.silu(h);
        let h = linear(tape, h, &ls.ffn_w2, &ls.ffn_b2);
        x = tape.add(nx, h);
        x = tape.named(x, "block_output");
    }
    Ok(Encoded { x, temporal_kv })
}

/// Token head on the selected rows of `x`, grouped by category.
fn head<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    params: &'p PolicyParams<T>,
    ctx: &SceneContext<T>,
    x: Var,
    rows: &[usize],
    agents: &[usize],
) -> Vec<CategoryLogits> {
    let lay = &params.layout;
    let k = params.config.vocab_size;
    let sel = tape.gather(x, rows.to_vec());
    let g = param(tape, &lay.head_ln_g);
    let b = param(tape, &lay.head_ln_b);
    let h = tape.layer_norm(sel, g, b);
    let h = linear(tape, h, &lay.head_w1, &lay.head_b1);
    let h = tape.silu(h);
    let mut out = Vec::new();
    for c in Category::ALL {
        let pos: Vec<usize> = (0..agents.len())
            .filter(|&i| ctx.categories[agents[i]] == c)
            .collect();
        if pos.is_empty() {
            continue;
        }
        let hc = tape.gather(h, pos.clone());
        let mut logits = linear(tape, hc, &lay.head_w2[c.index()], &lay.head_b2[c.index()]);
        let size = ctx.vocab_sizes[c.index()];
        if size < k {
            let mask = (0..k)
                .map(|i| if i < size { T::zero() } else { T::lit(MASKED_LOGIT) })
                .collect();
            let m = tape.constant(mask, 1, k);
            logits = tape.add_bias(logits, m);
        }
        let logits = tape.named(logits, "logits");
        out.push(CategoryLogits {
            category: c,
            var: logits,
            rows: pos,
        });
    }
    out
}

fn check_future<T>(ctx: &SceneContext<T>, future: &[Vec<(usize, Pose2<T>)>], max_steps: usize) -> Result<usize>
where
    T: Scalar,
{
    if future.len() != ctx.num_agents() {
        return Err(invalid(format!(
            "expected tokens for {} agents, got {}",
            ctx.num_agents(),
            future.len()
        )));
    }
    let m = future[0].len();
    if future.iter().any(|f| f.len() != m) {
        return Err(invalid("token histories differ in length across agents"));
    }
    if m > max_steps {
        return Err(invalid(format!("token history of {m} steps exceeds the model's {max_steps}")));
    }
    Ok(m)
}

/// Full teacher-forced pass. `future[a]` holds agent `a`'s (token, pose)
/// inputs for steps `0..m`; each `(agent, step)` in `predict` needs
/// `step <= m` and yields that step's next-token logits.
pub fn teacher_forced<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    params: &'p PolicyParams<T>,
    ctx: &SceneContext<T>,
    future: &[Vec<(usize, Pose2<T>)>],
    predict: &[(usize, usize)],
) -> Result<Vec<CategoryLogits>> {
    let m = check_future(ctx, future, params.config.max_steps)?;
    let n = ctx.num_agents();
    let hs = ctx.hist_slots();
    let mut items = ctx.history_items();
    for s in 0..m {
        for (agent, f) in future.iter().enumerate() {
            items.push(Item {
                agent,
                slot: hs + s,
                token: f[s].0,
                pose: f[s].1,
            });
        }
    }
    let mut rows = Vec::with_capacity(predict.len());
    let mut agents = Vec::with_capacity(predict.len());
    for &(agent, step) in predict {
        if agent >= n || step > m {
            return Err(invalid(format!("cannot predict agent {agent} at step {step}")));
        }
        rows.push((hs - 1 + step) * n + agent);
        agents.push(agent);
    }
    let map = map_kv(tape, params, ctx);
    let cache = TemporalCache::empty(params.layout.layers.len());
    let enc = encode(tape, params, ctx, &map, &cache, &items)?;
    Ok(head(tape, params, ctx, enc.x, &rows, &agents))
}

/// Logits for every agent's next token given all agents' tokens so far.
pub fn forward<T: Scalar>(
    params: &PolicyParams<T>,
    ctx: &SceneContext<T>,
    token_history: &[Vec<usize>],
) -> Result<StepLogits<T>> {
    if token_history.len() != ctx.num_agents() {
        return Err(invalid(format!(
            "expected tokens for {} agents, got {}",
            ctx.num_agents(),
            token_history.len()
        )));
    }
    let mut future = Vec::with_capacity(token_history.len());
    for (agent, ids) in token_history.iter().enumerate() {
        let mut pose = ctx.current_pose(agent);
        let mut f = Vec::with_capacity(ids.len());
        for &id in ids {
            pose = ctx.apply_token(agent, &pose, id)?;
            f.push((id, pose));
        }
        future.push(f);
    }
    let m = check_future(ctx, &future, params.config.max_steps)?;
    let predict: Vec<(usize, usize)> = (0..ctx.num_agents()).map(|a| (a, m)).collect();
    let mut tape = Tape::new(&params.values);
    let groups = teacher_forced(&mut tape, params, ctx, &future, &predict)?;
    tape.check_finite()?;
    let k = params.config.vocab_size;
    let mut logits = vec![Vec::new(); predict.len()];
    for g in &groups {
        let v = tape.value(g.var);
        for (i, &pos) in g.rows.iter().enumerate() {
            logits[pos] = v[i * k..(i + 1) * k].to_vec();
        }
    }
    Ok(StepLogits { logits })
}

/// Incremental decoding: encodes one slot at a time, caching temporal keys
/// and values. Produces the same logits bit for bit as `teacher_forced`.
pub struct Session<'a, T: Scalar> {
    params: &'a PolicyParams<T>,
    ctx: &'a SceneContext<T>,
    map: Vec<(Vec<T>, Vec<T>)>,
    cache: TemporalCache<T>,
    next_slot: usize,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// Encodes the history and returns step-0 logits for the agents in `want`.
    pub fn new(params: &'a PolicyParams<T>, ctx: &'a SceneContext<T>, want: &[usize]) -> Result<(Self, Vec<Vec<T>>)> {
        let map = {
            let mut tape = Tape::new(&params.values);
            let vars = map_kv(&mut tape, params, ctx);
            tape.check_finite()?;
            vars.iter()
                .map(|&(k, v)| (tape.value(k).to_vec(), tape.value(v).to_vec()))
                .collect()
        };
        let mut s = Self {
            params,
            ctx,
            map,
            cache: TemporalCache::empty(params.layout.layers.len()),
            next_slot: 0,
        };
        let items = ctx.history_items();
        let logits = s.run(&items, want)?;
        s.next_slot = ctx.hist_slots();
        Ok((s, logits))
    }

    /// Steps taken since the history.
    pub fn steps(&self) -> usize {
        self.next_slot - self.ctx.hist_slots()
    }

    /// Feeds one (token, pose) per agent and returns next-step logits for
    /// the agents in `want`.
    pub fn advance(&mut self, step: &[(usize, Pose2<T>)], want: &[usize]) -> Result<Vec<Vec<T>>> {
        if step.len() != self.ctx.num_agents() {
            return Err(invalid("one token per agent required"));
        }
        if self.steps() >= self.params.config.max_steps {
            return Err(invalid("session already at the model's step limit"));
        }
        let items: Vec<Item<T>> = step
            .iter()
            .enumerate()
            .map(|(agent, &(token, pose))| Item {
                agent,
                slot: self.next_slot,
                token,
                pose,
            })
            .collect();
        let logits = self.run(&items, want)?;
        self.next_slot += 1;
        Ok(logits)
    }

    fn run(&mut self, items: &[Item<T>], want: &[usize]) -> Result<Vec<Vec<T>>> {
        let params = self.params;
        let d = params.config.model_dim;
        let k = params.config.vocab_size;
        let n = self.ctx.num_agents();
        let mut tape = Tape::new(&params.values);
        let map: Vec<(Var, Var)> = self
            .map
            .iter()
            .map(|(kv, vv)| {
                let rows = kv.len() / d;
                (tape.constant(kv.clone(), rows, d), tape.constant(vv.clone(), rows, d))
            })
            .collect();
        let enc = encode(&mut tape, params, self.ctx, &map, &self.cache, items)?;
        let last = items.len() - n;
        let rows: Vec<usize> = want.iter().map(|&a| last + a).collect();
        let groups = head(&mut tape, params, self.ctx, enc.x, &rows, want);
        tape.check_finite()?;
        let mut logits = vec![Vec::new(); want.len()];
        for g in &groups {
            let v = tape.value(g.var);
            for (i, &pos) in g.rows.iter().enumerate() {
                logits[pos] = v[i * k..(i + 1) * k].to_vec();
            }
        }
        for (l, &(kv, vv)) in enc.temporal_kv.iter().enumerate() {
            self.cache.k[l].extend_from_slice(tape.value(kv));
            self.cache.v[l].extend_from_slice(tape.value(vv));
        }
        self.cache.items.extend_from_slice(items);
        Ok(logits)
    }
}
