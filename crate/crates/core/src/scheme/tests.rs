use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::embed::{Encoders, Variant};
use crate::hypergraph::{build_hypergraph, HeteroGraph, IntegrityMode, NodeRef};
use crate::relmodel::tests::{attr, rel};
use crate::relmodel::{detect_schema, Database, RawType, SchemaDef, Table, Value};
use crate::sampler::{bfs_expand, mask_targets, MiniBatch, SampleSpec, TargetLabels, TaskKind};
use crate::tensor::{grad_check_params, layer_norm, Tensor};

/// Customers with orders with items. Customer 11 has no orders.
pub(crate) fn shop_db(with_items: bool) -> Database {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut relations = vec![
        rel(
            "cust",
            vec![attr("id", RawType::Integer), attr("seg", RawType::Text), attr("age", RawType::Real), attr("label", RawType::Integer)],
            &["id"],
            &[],
        ),
        rel(
            "ord",
            vec![attr("id", RawType::Integer), attr("cust_id", RawType::Integer), attr("amt", RawType::Real), attr("ch", RawType::Text)],
            &["id"],
            &[(&["cust_id"], "cust")],
        ),
    ];
    let i = Value::Integer;
    let pick = |rng: &mut ChaCha8Rng, a: &str, b: &str| Value::Text(if rng.gen::<bool>() { a } else { b }.to_string());
    let cust = (0..12).map(|r| vec![i(r), pick(&mut rng, "a", "b"), Value::Real(rng.gen_range(18.0..80.0)), i(r % 2)]).collect();
    let ord = (0..24).map(|r| vec![i(r), i(rng.gen_range(0..11)), Value::Real(rng.gen_range(1.0..100.0)), pick(&mut rng, "w", "s")]).collect();
    let mut tables = vec![Table::new(4, cust), Table::new(4, ord)];
    if with_items {
        relations.push(rel("item", vec![attr("id", RawType::Integer), attr("ord_id", RawType::Integer), attr("w", RawType::Real)], &["id"], &[(&["ord_id"], "ord")]));
        tables.push(Table::new(3, (0..30).map(|r| vec![i(r), i(rng.gen_range(0..24)), Value::Real(rng.gen_range(0.0..5.0))]).collect()));
    }
    let db = Database::new(SchemaDef { relations }, tables).unwrap();
    Database { schema: detect_schema(&db).schema, tables: db.tables }
}

pub(crate) struct Fixture {
    pub graph: HeteroGraph,
    pub encoders: Encoders,
    pub encoded: Vec<crate::embed::EncodedTable>,
    pub spec: SampleSpec,
    pub labels: TargetLabels,
}

impl Fixture {
    pub fn new(db: Database) -> Self {
        let encoders = Encoders::fit(&db, None);
        let encoded = encoders.encode(&db, None).unwrap();
        let spec = SampleSpec { target_relation: 0, target_attr: "label".into(), task: TaskKind::Classification, depth_limit: None, fanout: None };
        let labels = TargetLabels::from_db(&db, &spec).unwrap();
        let graph = build_hypergraph(db, IntegrityMode::Strict).unwrap().0;
        Self { graph, encoders, encoded, spec, labels }
    }

    pub fn batch(&self, seeds: &[usize], depth: Option<usize>) -> MiniBatch {
        let seeds: Vec<NodeRef> = seeds.iter().map(|&r| NodeRef::new(0, r)).collect();
        let nodes = bfs_expand(&self.graph, &seeds, depth);
        let b = MiniBatch::assemble(&self.graph, &self.encoded, &nodes, &seeds, self.labels.labels_for(&seeds).unwrap()).unwrap();
        mask_targets(b, &self.spec, &self.graph.db.schema).unwrap()
    }

    pub fn model(&self, spec: &ModelSpec, seed: u64) -> Model {
        Model::new(spec, &self.graph.db.schema, &self.encoders, 0, seed).unwrap()
    }
}

fn decoder() -> DecoderSpec {
    DecoderSpec { layers: 2, hidden: 8, batch_norm: true, outputs: 2 }
}

fn spec(kind: Assembly, layers: usize) -> ModelSpec {
    ModelSpec::assembly(kind, 8, layers, 2, Variant::Base, decoder())
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max diff {d}");
}

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::matrix(rows).unwrap()
}

#[test]
fn self_attention_single_token_is_value_path() {
    let x = m(&[&[0.5, -1.0]]);
    let (wq, wk) = (m(&[&[0.3, 0.1], &[0.2, -0.4]]), m(&[&[1.0, 0.0], &[0.5, 2.0]]));
    let (wv, wo) = (m(&[&[0.7, -0.2], &[0.1, 0.9]]), m(&[&[1.0, 1.0], &[0.0, 2.0]]));
    let out = self_attention(&x, 2, &wq, &wk, &wv, &wo).unwrap();
    // x·Wv = [0.25, -1.0]; ·Wo = [0.25, -1.75]
    assert_close(&out, &m(&[&[0.25, -1.75]]), 1e-12);
}

#[test]
fn self_attention_identical_tokens_give_identical_rows() {
    let x = m(&[&[0.2, 0.4, -0.1, 0.3], &[0.2, 0.4, -0.1, 0.3], &[0.2, 0.4, -0.1, 0.3]]);
    let w = Tensor::new(vec![4, 4], (0..16).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
    let out = self_attention(&x, 2, &w, &w, &w, &w).unwrap();
    for r in 1..3 {
        assert!(out.row(0).iter().zip(out.row(r)).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn self_attention_hand_case() {
    let one = m(&[&[1.0]]);
    let out = self_attention(&m(&[&[1.0], &[2.0]]), 1, &one, &one, &one, &one).unwrap();
    let e = core::f64::consts::E;
    let r0 = (e + 2.0 * e * e) / (e + e * e);
    let r1 = (e * e + 2.0 * e.powi(4)) / (e * e + e.powi(4));
    assert_close(&out, &m(&[&[r0], &[r1]]), 1e-12);
    assert!(self_attention(&m(&[&[1.0, 2.0, 3.0]]), 2, &Tensor::identity(3), &Tensor::identity(3), &Tensor::identity(3), &Tensor::identity(3)).is_err());
}

#[test]
fn cross_attention_cases() {
    let one = m(&[&[1.0]]);
    let e = core::f64::consts::E;
    let out = cross_attention_combine(&m(&[&[1.0]]), &m(&[&[0.0], &[1.0]]), 1, &one, &one, &one, &one).unwrap();
    assert_close(&out, &m(&[&[e / (1.0 + e)]]), 1e-12);
    // a single key: every query row gets the value projection
    let w = m(&[&[0.5, 1.0], &[-1.0, 0.25]]);
    let i2 = Tensor::identity(2);
    let out = cross_attention_combine(&m(&[&[1.0, 2.0], &[-3.0, 0.5], &[0.0, 0.0]]), &m(&[&[2.0, 1.0]]), 2, &w, &w, &w, &i2).unwrap();
    for r in 0..3 {
        assert!((out.row(r)[0] - 0.0).abs() < 1e-12 && (out.row(r)[1] - 2.25).abs() < 1e-12);
    }
    assert!(cross_attention_combine(&m(&[&[1.0]]), &m(&[&[1.0, 2.0]]), 1, &one, &one, &one, &one).is_err());
}

#[test]
fn attend_aggregate_cases() {
    let c = m(&[&[0.3, -0.2], &[1.0, 0.5]]);
    let (wq, wk) = (m(&[&[1.0, 0.2], &[0.0, 1.0]]), m(&[&[0.5, 0.0], &[0.3, 1.0]]));
    let wv = m(&[&[2.0, 0.0], &[0.0, -1.0]]);
    let a = m(&[&[1.0, 2.0], &[3.0, -1.0]]);
    let b = m(&[&[-0.5, 0.5], &[0.0, 2.0]]);
    let single = attend_aggregate(&c, core::slice::from_ref(&a), &wq, &wk, &wv).unwrap();
    assert_close(&single, &m(&[&[2.0, -2.0], &[6.0, 1.0]]), 1e-12);
    let triple = attend_aggregate(&c, &[a.clone(), a.clone(), a.clone()], &wq, &wk, &wv).unwrap();
    assert_close(&triple, &single, 1e-12);
    let ab = attend_aggregate(&c, &[a.clone(), b.clone()], &wq, &wk, &wv).unwrap();
    let ba = attend_aggregate(&c, &[b, a], &wq, &wk, &wv).unwrap();
    assert_close(&ab, &ba, 1e-12);
    assert_eq!(attend_aggregate(&c, &[], &wq, &wk, &wv).unwrap(), Tensor::zeros(&[2, 2]));
    assert!(attend_aggregate(&c, &[m(&[&[1.0, 2.0]])], &wq, &wk, &wv).is_err());
}

#[test]
fn sum_aggregate_cases() {
    let a = m(&[&[1.0, 2.0]]);
    let b = m(&[&[-3.0, 0.5]]);
    assert_eq!(sum_aggregate(&[], &[1, 2]).unwrap(), Tensor::zeros(&[1, 2]));
    assert_eq!(sum_aggregate(core::slice::from_ref(&a), &[1, 2]).unwrap(), a);
    assert_eq!(sum_aggregate(&[a.clone(), b.clone()], &[1, 2]).unwrap(), sum_aggregate(&[b, a], &[1, 2]).unwrap());
    assert!(sum_aggregate(&[m(&[&[1.0]])], &[1, 2]).is_err());
}

#[test]
fn add_mean_cases() {
    let out = add_mean_combine(&m(&[&[0.0, 0.0]]), &m(&[&[2.0, 0.0], &[0.0, 2.0]])).unwrap();
    assert_close(&out, &m(&[&[1.0, 1.0]]), 1e-15);
    let ti = m(&[&[1.0, -2.0], &[0.5, 0.5]]);
    assert_eq!(add_mean_combine(&ti, &Tensor::zeros(&[3, 2])).unwrap(), ti);
    let fwd = add_mean_combine(&ti, &m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 7.0]])).unwrap();
    let rev = add_mean_combine(&ti, &m(&[&[5.0, 7.0], &[3.0, 4.0], &[1.0, 2.0]])).unwrap();
    assert_close(&fwd, &rev, 1e-12);
    assert!(add_mean_combine(&ti, &Tensor::zeros(&[0, 2])).is_err());
}

#[test]
fn concat_attributes_cases() {
    assert_eq!(concat_attributes(&m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(concat_attributes(&m(&[&[3.0, 4.0], &[1.0, 2.0]])).unwrap().data(), &[3.0, 4.0, 1.0, 2.0]);
    assert_eq!(concat_attributes(&m(&[&[5.0, 6.0]])).unwrap().shape(), &[1, 2]);
}

#[test]
fn sage_cases() {
    let ws = m(&[&[1.0, 2.0], &[0.0, 1.0]]);
    let wf = m(&[&[0.5, 0.0], &[1.0, -1.0], &[0.0, 3.0]]);
    let ti = [1.0, -1.0];
    let tj = [2.0, 0.0, 1.0];
    // ti·Ws = [1, 1]; tj·Wf = [1, 3]
    assert_eq!(sage_combine(&ti, &tj, 1, &ws, &wf).unwrap(), vec![2.0, 4.0]);
    let three: Vec<f64> = (0..3).map(|_| sage_combine(&ti, &tj, 3, &ws, &wf).unwrap()).fold(vec![0.0; 2], |acc, v| vec![acc[0] + v[0], acc[1] + v[1]]);
    assert!((three[0] - 2.0).abs() < 1e-12 && (three[1] - 4.0).abs() < 1e-12);
    let i2 = Tensor::identity(2);
    let a = sage_combine(&[1.0, 1.0], &[2.0, 0.0], 2, &i2, &i2).unwrap();
    let b = sage_combine(&[1.0, 1.0], &[0.0, 4.0], 2, &i2, &i2).unwrap();
    assert_eq!([a[0] + b[0], a[1] + b[1]], [2.0, 3.0]);
    assert!(sage_combine(&ti, &tj, 0, &ws, &wf).is_err());
}

fn zero_params(store: &mut ParamStore, prefixes: &[&str]) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| prefixes.iter().any(|x| p.name.contains(x))).map(|(id, _)| id).collect();
    for id in ids {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn ln2(x: &Tensor) -> Tensor {
    let f = x.last_dim();
    let (g, b) = (Tensor::filled(&[f], 1.0), Tensor::zeros(&[f]));
    layer_norm(&layer_norm(x, &g, &b).unwrap(), &g, &b).unwrap()
}

#[test]
fn encoder_layer_zero_weights_is_double_layer_norm() {
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut store, 1, "enc", 4, 2).unwrap();
    zero_params(&mut store, &[".wq", ".wk", ".wv", ".wo", ".w1", ".w2"]);
    let x = m(&[&[1.0, 2.0, -1.0, 0.5], &[0.0, 3.0, 1.0, -2.0], &[0.3, 0.3, 0.1, 0.2]]);
    let out = transformer_encoder_layer(&mut store, &layer, &x).unwrap();
    assert_eq!(out.shape(), x.shape());
    assert_close(&out, &ln2(&x), 1e-12);
}

#[test]
fn residual_fnn_zero_weights_is_double_layer_norm() {
    let mut store = ParamStore::new();
    let block = ResidualFnn::new(&mut store, 1, "c", 3).unwrap();
    zero_params(&mut store, &[".w1", ".w2"]);
    let h = Tensor::new(vec![2, 1, 3], vec![1.0, -1.0, 0.5, 2.0, 0.0, 4.0]).unwrap();
    let out = residual_fnn_combine(&mut store, &block, &h, &Tensor::zeros(&[2, 1, 3])).unwrap();
    assert_close(&out, &ln2(&h), 1e-12);
    assert!(residual_fnn_combine(&mut store, &block, &h, &Tensor::zeros(&[1, 1, 3])).is_err());
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum of all outputs with fixed random weights, as a scalar loss.
fn weighted(ctx: &mut Ctx, y: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(ctx.tape.shape(y), seed);
    let w = ctx.tape.constant(w);
    let p = ctx.tape.mul(y, w)?;
    ctx.tape.sum(p)
}

fn check_block<F>(store: &mut ParamStore, x: &Tensor, mut f: F)
where
    F: FnMut(&mut Ctx, Var) -> Result<Var>,
{
    let report = grad_check_params(
        store,
        |tape, store| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = Ctx { tape, store, training: true, dropout: 0.0, rng: &mut rng };
            let xv = ctx.tape.constant(x.clone());
            let y = f(&mut ctx, xv)?;
            weighted(&mut ctx, y, 99)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn encoder_layer_gradients() {
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut store, 2, "enc", 4, 2).unwrap();
    check_block(&mut store, &random_tensor(&[2, 3, 4], 5), |ctx, x| layer.forward(ctx, x));
}

#[test]
fn residual_fnn_gradients() {
    let mut store = ParamStore::new();
    let block = ResidualFnn::new(&mut store, 2, "c", 4).unwrap();
    let m = random_tensor(&[2, 3, 4], 6);
    check_block(&mut store, &random_tensor(&[2, 3, 4], 5), |ctx, x| {
        let mv = ctx.tape.constant(m.clone());
        block.forward(ctx, x, mv)
    });
}

#[test]
fn attend_aggregate_and_sage_gradients() {
    let mut store = ParamStore::new();
    let agg = AttendAggregate::new(&mut store, 3, "a", 4).unwrap();
    let sage = SageCombine::new(&mut store, 3, "s", 4, 4).unwrap();
    let (src, dst) = ([0, 0, 1, 2, 2, 2], [1, 0, 2, 0, 1, 2]);
    let edges = EdgeBatch::new(&src, &dst, 3);
    let nb = random_tensor(&[3, 1, 4], 8);
    check_block(&mut store, &random_tensor(&[3, 1, 4], 7), |ctx, x| {
        let n = ctx.tape.constant(nb.clone());
        let ci = ctx.tape.gather(x, &src)?;
        let nj = ctx.tape.gather(n, &dst)?;
        let msg = sage.forward(ctx, ci, nj, &edges)?;
        agg.forward(ctx, x, msg, &edges)
    });
}

#[test]
fn dropout_only_in_training() {
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, 4, "at", 4, 2).unwrap();
    let x = random_tensor(&[1, 5, 4], 3);
    let run = |store: &mut ParamStore, training: bool, seed: u64| {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = Ctx { tape: &mut tape, store, training, dropout: 0.5, rng: &mut rng };
        let xv = ctx.tape.constant(x.clone());
        let y = attn.forward(&mut ctx, xv, xv).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(&mut store, false, 1), run(&mut store, false, 2));
    assert_ne!(run(&mut store, true, 1), run(&mut store, false, 1));
    assert_eq!(run(&mut store, true, 1), run(&mut store, true, 1));
}

#[test]
fn spec_validation() {
    let mut s = spec(Assembly::Dbformer, 2);
    s.heads = 3;
    assert!(matches!(s.validate(), Err(Error::Spec(_))));
    let mut s = spec(Assembly::DbTabtransformer, 1);
    s.embedder.numeric_mode = crate::embed::NumericMode::Linear;
    assert!(s.validate().is_err());
    let mut s = spec(Assembly::Dbgnn, 1);
    s.post_embed = PostEmbed::None;
    assert!(s.validate().is_err());
    let mut s = spec(Assembly::Dbformer, 1);
    s.post_embed = PostEmbed::ConcatAttributes;
    assert!(s.validate().is_err());
    assert!(spec(Assembly::Dbformer, 0).validate().is_err());
    let mut s = spec(Assembly::TabularFnn, 0);
    assert!(s.validate().is_ok());
    s.layers = spec(Assembly::Dbgnn, 1).layers;
    assert!(s.validate().is_err());
    for a in Assembly::ALL {
        assert_eq!(Assembly::parse(a.name()).unwrap(), a);
    }
    assert!(Assembly::parse("gat").is_err());
}

#[test]
fn assemblies_run_with_expected_shapes() {
    let fx = Fixture::new(shop_db(true));
    let batch = fx.batch(&[0, 3, 11], Some(2));
    for kind in Assembly::ALL {
        let layers = if kind == Assembly::TabularFnn { 0 } else { 2 };
        let mut model = fx.model(&spec(kind, layers), 7);
        let out = model.forward_batch(&batch).unwrap();
        let n_t = model.network.embedder.relations[0].n_tokens();
        let expect: Vec<usize> = match kind {
            Assembly::Dbformer | Assembly::DbTabtransformer => vec![3, n_t, 8],
            _ => vec![3, 1, n_t * 8],
        };
        assert_eq!(out.shape(), &expect[..], "{}", kind.name());
        assert!(out.all_finite());
        assert_eq!(model.predict(&batch).unwrap().shape(), &[3, 2]);
    }
}

#[test]
fn unmasked_batch_rejected() {
    let fx = Fixture::new(shop_db(false));
    let mut batch = fx.batch(&[0], Some(1));
    batch.label_mask_applied = false;
    assert!(fx.model(&spec(Assembly::Dbformer, 1), 1).forward_batch(&batch).is_err());
}

fn shuffled_pairs(mut batch: MiniBatch, seed: u64) -> MiniBatch {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch.edges.iter_mut().for_each(|e| e.pairs.shuffle(&mut rng));
    batch
}

/// Reorders the local rows of relation `r` by `perm` (new position -> old position).
fn permute_rows(mut batch: MiniBatch, r: usize, perm: &[usize]) -> MiniBatch {
    let mut pos = vec![0; perm.len()];
    perm.iter().enumerate().for_each(|(new, &old)| pos[old] = new);
    batch.rows[r] = perm.iter().map(|&o| batch.rows[r][o]).collect();
    batch.features[r] = batch.features[r].gather(perm);
    for e in &mut batch.edges {
        for p in &mut e.pairs {
            if e.source_relation == r {
                p.0 = pos[p.0];
            }
            if e.target_relation == r {
                p.1 = pos[p.1];
            }
        }
    }
    if r == batch.target_relation {
        batch.seed_local = batch.seed_local.iter().map(|&s| pos[s]).collect();
    }
    batch
}

#[test]
fn neighbor_order_invariance_all_assemblies() {
    let fx = Fixture::new(shop_db(true));
    let batch = fx.batch(&[0, 1, 2, 5], Some(3));
    let n_ord = batch.rows[1].len();
    let perm: Vec<usize> = (0..n_ord).rev().collect();
    for kind in Assembly::ALL {
        let layers = if kind == Assembly::TabularFnn { 0 } else { 2 };
        let mut model = fx.model(&spec(kind, layers), 11);
        let base = model.forward_batch(&batch).unwrap();
        assert_close(&model.forward_batch(&shuffled_pairs(batch.clone(), 4)).unwrap(), &base, 1e-9);
        assert_close(&model.forward_batch(&permute_rows(batch.clone(), 1, &perm)).unwrap(), &base, 1e-9);
    }
}

#[test]
fn receptive_field_is_local() {
    let fx = Fixture::new(shop_db(true));
    for kind in [Assembly::Dbformer, Assembly::Dbgnn, Assembly::DbTabtransformer] {
        for layers in 1..=2 {
            let mut model = fx.model(&spec(kind, layers), 5);
            let near = model.forward_batch(&fx.batch(&[0, 4], Some(layers))).unwrap();
            let far = model.forward_batch(&fx.batch(&[0, 4], None)).unwrap();
            assert_eq!(near, far, "{} with {layers} layers", kind.name());
        }
    }
}

#[test]
fn relation_beyond_reach_changes_nothing() {
    let with = Fixture::new(shop_db(true));
    let without = Fixture::new(shop_db(false));
    let s = spec(Assembly::Dbformer, 1);
    let a = with.model(&s, 3).forward_batch(&with.batch(&[0, 1, 2], None)).unwrap();
    let b = without.model(&s, 3).forward_batch(&without.batch(&[0, 1, 2], None)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tabular_fnn_ignores_other_relations() {
    let with = Fixture::new(shop_db(true));
    let without = Fixture::new(shop_db(false));
    let s = spec(Assembly::TabularFnn, 0);
    let a = with.model(&s, 3).predict(&with.batch(&[0, 1, 2, 7], None)).unwrap();
    let b = without.model(&s, 3).predict(&without.batch(&[0, 1, 2, 7], None)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn isolated_seed_is_closing_of_transform() {
    let fx = Fixture::new(shop_db(false));
    let s = spec(Assembly::Dbformer, 1);
    let mut model = fx.model(&s, 21);
    let batch = fx.batch(&[11], Some(1));
    assert!(batch.edges.iter().all(|e| e.pairs.is_empty()));
    let out = model.forward_batch(&batch).unwrap();

    let mut tape = Tape::new();
    let t0 = model.network.embedder.relations[0].embed(&mut tape, &model.store, &batch.features[0]).unwrap();
    let t0 = tape.value(t0).clone();
    let (n, d) = (t0.shape()[1], t0.shape()[2]);
    let mut fresh = ParamStore::new();
    let enc = EncoderLayer::new(&mut fresh, 21, "L0.cust.enc", 8, 2).unwrap();
    let close = ResidualFnn::new(&mut fresh, 21, "L0.cust.close", 8).unwrap();
    let t = transformer_encoder_layer(&mut fresh, &enc, &t0.clone().reshaped(vec![n, d]).unwrap()).unwrap();
    let expect = residual_fnn_combine(&mut fresh, &close, &t, &Tensor::zeros(&[n, d])).unwrap();
    assert_close(&out, &expect.reshaped(vec![1, n, d]).unwrap(), 1e-12);
}

/// Plain heterogeneous SAGE with mean aggregation over flattened embeddings,
/// batch norm at its initial running statistics.
fn sage_reference(model: &mut Model, batch: &MiniBatch, layers: usize) -> Vec<Vec<f64>> {
    let net = &model.network;
    let nrel = net.state_shapes.len();
    let mut h: Vec<Vec<Vec<f64>>> = Vec::new();
    for r in 0..nrel {
        let mut tape = Tape::new();
        let x = net.embedder.relations[r].embed(&mut tape, &model.store, &batch.features[r]).unwrap();
        let v = tape.value(x);
        let w = net.state_shapes[r].1;
        h.push(v.data().chunks(w.max(1)).map(<[f64]>::to_vec).take(batch.features[r].rows).collect());
    }
    let p = |name: String| model.store.get(model.store.id(&name).unwrap()).value.clone();
    let names: Vec<String> = model.network.embedder.relations.iter().enumerate().map(|(r, _)| ["cust", "ord", "item"][r].to_string()).collect();
    for l in 0..layers {
        let mut t = h.clone();
        for r in 0..nrel {
            let (g, b) = (p(alloc::format!("L{l}.{}.bn.g", names[r])), p(alloc::format!("L{l}.{}.bn.b", names[r])));
            for row in &mut t[r] {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = (g.data()[c] * *v / libm::sqrt(1.0 + crate::tensor::BN_EPS) + b.data()[c]).max(0.0);
                }
            }
        }
        let mut next: Vec<Vec<Vec<f64>>> = t.iter().map(|rows| rows.iter().map(|row| vec![0.0; row.len()]).collect()).collect();
        for (et, e) in batch.edges.iter().enumerate() {
            let (s, tr) = (e.source_relation, e.target_relation);
            let ws = p(alloc::format!("L{l}.e{et}.sage.w_self"));
            let wf = p(alloc::format!("L{l}.e{et}.sage.w_fk"));
            let fi = net.state_shapes[s].1;
            let fj = net.state_shapes[tr].1;
            for i in 0..t[s].len() {
                let nbrs: Vec<usize> = e.pairs.iter().filter(|p| p.0 == i).map(|p| p.1).collect();
                if nbrs.is_empty() {
                    continue;
                }
                for c in 0..fi {
                    let own: f64 = (0..fi).map(|k| t[s][i][k] * ws.data()[k * fi + c]).sum();
                    let mean: f64 = nbrs.iter().map(|&j| (0..fj).map(|k| t[tr][j][k] * wf.data()[k * fi + c]).sum::<f64>()).sum::<f64>() / nbrs.len() as f64;
                    next[s][i][c] += own + mean;
                }
            }
        }
        h = next;
    }
    batch.seed_local.iter().map(|&s| h[batch.target_relation][s].clone()).collect()
}

#[test]
fn dbgnn_matches_plain_sage_reference() {
    let fx = Fixture::new(shop_db(true));
    let batch = fx.batch(&[0, 2, 6, 11], None);
    for layers in 1..=2 {
        let mut model = fx.model(&spec(Assembly::Dbgnn, layers), 13);
        let out = model.forward_batch(&batch).unwrap();
        let reference = sage_reference(&mut model, &batch, layers);
        let w = out.last_dim();
        for (i, r) in reference.iter().enumerate() {
            for c in 0..w {
                assert!((out.data()[i * w + c] - r[c]).abs() <= 1e-9, "layers {layers} seed {i} coord {c}");
            }
        }
    }
}

#[test]
fn end_to_end_gradients_all_assemblies() {
    let fx = Fixture::new(shop_db(true));
    let batch = fx.batch(&[0, 1, 2], Some(2));
    let labels = vec![0usize, 1, 1];
    for kind in Assembly::ALL {
        let layers = if kind == Assembly::TabularFnn { 0 } else { 1 };
        let mut s = spec(kind, layers);
        s.d_model = 4;
        s.embedder.d_model = 4;
        s.decoder.hidden = 4;
        let Model { network, mut store } = fx.model(&s, 9);
        // zero biases over constant batch-norm columns would sit on ReLU kinks
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad).collect();
        for id in ids {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        let report = grad_check_params(
            &mut store,
            |tape, store| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                // batch statistics would cancel row-constant terms such as positional vectors exactly
                let mut ctx = Ctx { tape, store, training: false, dropout: 0.0, rng: &mut rng };
                let logits = network.logits(&mut ctx, &batch)?;
                ctx.tape.cross_entropy(logits, &labels)
            },
            1e-6,
            Some(6),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{}: {report:?}", kind.name());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregates_are_multiset_invariant(vals in proptest::collection::vec(-3.0f64..3.0, 12), rot in 0usize..3) {
        let msgs: Vec<Tensor> = vals.chunks(4).map(|c| Tensor::new(vec![2, 2], c.to_vec()).unwrap()).collect();
        let mut rotated = msgs.clone();
        rotated.rotate_left(rot);
        rotated.swap(0, 1);
        let c = m(&[&[0.5, -0.5], &[1.0, 0.2]]);
        let w = m(&[&[0.9, 0.1], &[-0.3, 1.2]]);
        let a = attend_aggregate(&c, &msgs, &w, &w, &w).unwrap();
        let b = attend_aggregate(&c, &rotated, &w, &w, &w).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        let s1 = sum_aggregate(&msgs, &[2, 2]).unwrap();
        let s2 = sum_aggregate(&rotated, &[2, 2]).unwrap();
        prop_assert!(s1.max_abs_diff(&s2) <= 1e-12);
    }
}
