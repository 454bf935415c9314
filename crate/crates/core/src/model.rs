//! The multi-task network: shared embeddings, a mixture of experts with one
//! gate per tower, CTR / CVR-teacher / CVR-student towers, the click
//! conditioner feeding the teacher, and the Gaussian variational heads that
//! couple teacher and student hidden layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{0} is not enabled on this model")]
    Disabled(&'static str),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// How the CVR teacher sees its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherInput {
    /// Learner output combined with the projected click propensity via outer product.
    Conditioned,
    /// Learner output fed straight to the predictor.
    Plain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub cardinalities: Vec<usize>,
    pub embed_dim: usize,
    pub n_experts: usize,
    pub expert_dim: usize,
    pub tower_hidden: Vec<usize>,
    /// Width of the click-propensity projection.
    pub cond_dim: usize,
    /// Number of teacher/student layer pairs coupled by the variational heads.
    pub transfer_layers: usize,
    pub teacher: TeacherInput,
    pub imputation: bool,
}

impl ModelConfig {
    pub fn new(cardinalities: Vec<usize>) -> Self {
        ModelConfig {
            cardinalities,
            embed_dim: 5,
            n_experts: 8,
            expert_dim: 256,
            tower_hidden: vec![128, 64, 32],
            cond_dim: 8,
            transfer_layers: 3,
            teacher: TeacherInput::Conditioned,
            imputation: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cardinalities.is_empty() || self.cardinalities.contains(&0) {
            return Err(ModelError::Config(
                "need non-empty, non-zero cardinalities".into(),
            ));
        }
        if self.embed_dim == 0 || self.n_experts == 0 || self.expert_dim == 0 || self.cond_dim == 0
        {
            return Err(ModelError::Config("layer widths must be positive".into()));
        }
        if self.tower_hidden.is_empty() || self.tower_hidden.contains(&0) {
            return Err(ModelError::Config(
                "towers need positive hidden sizes".into(),
            ));
        }
        if self.transfer_layers == 0 || self.transfer_layers > self.tower_hidden.len() {
            return Err(ModelError::Config(format!(
                "transfer layers must lie in 1..={}, got {}",
                self.tower_hidden.len(),
                self.transfer_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn register(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self, DiffError> {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear { w, b })
    }

    fn apply(&self, ctx: &mut Binder, x: Var) -> Result<Var, DiffError> {
        let w = ctx.bind(self.w);
        let b = ctx.bind(self.b);
        let xw = ctx.graph.matmul(x, w)?;
        ctx.graph.add_row(xw, b)
    }
}

/// Representation learner (ReLU MLP) plus a single linear predictor.
#[derive(Clone, Debug)]
struct Tower {
    layers: Vec<Linear>,
    head: Linear,
}

impl Tower {
    fn register(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: &[usize],
        head_in: Option<usize>,
    ) -> Result<Self, DiffError> {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::register(
                store,
                &format!("{name}.layer{i}"),
                width,
                h,
            )?);
            width = h;
        }
        let head = Linear::register(store, &format!("{name}.head"), head_in.unwrap_or(width), 1)?;
        Ok(Tower { layers, head })
    }

    /// Hidden activations of every learner layer, shallowest first.
    fn learn(&self, ctx: &mut Binder, x: Var) -> Result<Vec<Var>, DiffError> {
        let mut taps = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let z = layer.apply(ctx, h)?;
            h = ctx.graph.relu(z);
            taps.push(h);
        }
        Ok(taps)
    }
}

#[derive(Clone, Debug)]
struct VariationalPair {
    mean: Linear,
    rho: ParamId,
}

/// Binds parameters into a graph on first use.
struct Binder<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    fn new(store: &'a ParamStore) -> Self {
        Binder {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    fn bind(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.graph.param(self.store.get(id).clone());
        self.bound[id.index()] = Some(v);
        v
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub p_ctr: Var,
    /// `p_ctr` cut from the graph; used for the conditioner and propensity weights.
    pub p_ctr_detached: Var,
    pub p_cvr_teacher: Var,
    pub p_cvr_student: Var,
    /// Teacher learner activations of the transfer layers, shallowest first.
    pub teacher_taps: Vec<Var>,
    pub student_taps: Vec<Var>,
    /// Expert mixture feeding the student learner.
    pub student_input: Var,
    /// Imputed error `ê ≥ 0` when the imputation tower is enabled.
    pub p_imputation: Option<Var>,
    pub batch_size: usize,
}

/// A finished forward pass: the graph plus the parameter bindings needed to
/// read gradients back after backward.
pub struct Forward {
    pub graph: Graph,
    pub out: ForwardOut,
    bound: Vec<Option<Var>>,
}

impl Forward {
    /// Gradient per parameter, aligned with the store's ids. `None` where the
    /// parameter was unused or received no gradient.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v).map(<[f64]>::to_vec)))
            .collect()
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.graph.value(v).values()
    }
}

/// Predictions for a block of records, without a graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub ctr: Vec<f64>,
    pub cvr_teacher: Vec<f64>,
    pub cvr_student: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EviModel {
    cfg: ModelConfig,
    params: ParamStore,
    embeddings: Vec<ParamId>,
    experts: Vec<Linear>,
    /// Gates for the CTR, teacher and student towers, in that order.
    gates: [Linear; 3],
    ctr: Tower,
    teacher: Tower,
    student: Tower,
    imputation: Option<Tower>,
    conditioner: Option<Linear>,
    variational: Vec<VariationalPair>,
}

/// `ln(e - 1)`, the pre-activation giving `softplus = 1`.
pub const RHO_UNIT: f64 = 0.541_324_854_612_918_1;

impl EviModel {
    /// Builds the architecture and initializes it from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::build(cfg)?;
        model.init_parameters(seed);
        Ok(model)
    }

    /// Builds the architecture with all parameters zero.
    pub fn build(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let embeddings = cfg
            .cardinalities
            .iter()
            .enumerate()
            .map(|(f, &card)| {
                s.add(
                    format!("embedding.f{f}"),
                    Tensor::zeros(&[card, cfg.embed_dim]),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let input = cfg.cardinalities.len() * cfg.embed_dim;
        let experts = (0..cfg.n_experts)
            .map(|e| Linear::register(&mut s, &format!("experts.{e}"), input, cfg.expert_dim))
            .collect::<Result<Vec<_>, _>>()?;
        let gates = [
            Linear::register(&mut s, "gates.ctr", input, cfg.n_experts)?,
            Linear::register(&mut s, "gates.teacher", input, cfg.n_experts)?,
            Linear::register(&mut s, "gates.student", input, cfg.n_experts)?,
        ];
        let last = *cfg.tower_hidden.last().unwrap();
        let ctr = Tower::register(&mut s, "ctr", cfg.expert_dim, &cfg.tower_hidden, None)?;
        let (teacher_head, conditioner) = match cfg.teacher {
            TeacherInput::Conditioned => (
                Some(cfg.cond_dim * last),
                Some(Linear::register(&mut s, "conditioner", 1, cfg.cond_dim)?),
            ),
            TeacherInput::Plain => (None, None),
        };
        let teacher = Tower::register(
            &mut s,
            "teacher",
            cfg.expert_dim,
            &cfg.tower_hidden,
            teacher_head,
        )?;
        let student = Tower::register(&mut s, "student", cfg.expert_dim, &cfg.tower_hidden, None)?;
        let imputation = if cfg.imputation {
            Some(Tower::register(
                &mut s,
                "imputation",
                cfg.expert_dim,
                &cfg.tower_hidden,
                None,
            )?)
        } else {
            None
        };
        let depth = cfg.tower_hidden.len();
        let variational = (depth - cfg.transfer_layers..depth)
            .map(|layer| {
                let dim = cfg.tower_hidden[layer];
                Ok(VariationalPair {
                    mean: Linear::register(&mut s, &format!("vie.layer{layer}.mean"), dim, dim)?,
                    rho: s.add(format!("vie.layer{layer}.rho"), Tensor::zeros(&[dim]))?,
                })
            })
            .collect::<Result<Vec<_>, DiffError>>()?;
        Ok(EviModel {
            cfg,
            params: s,
            embeddings,
            experts,
            gates,
            ctr,
            teacher,
            student,
            imputation,
            conditioner,
            variational,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Glorot-uniform weights `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases, and `ρ = ln(e - 1)` so every variational scale starts at 1.
    pub fn init_parameters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho_ids: Vec<ParamId> = self.variational.iter().map(|p| p.rho).collect();
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let is_bias = self.params.name(id).ends_with(".b");
            let t = self.params.get_mut(id);
            if rho_ids.contains(&id) {
                t.values_mut().fill(RHO_UNIT);
            } else if is_bias {
                t.values_mut().fill(0.0);
            } else {
                let (fan_in, fan_out) = (t.shape()[0], t.shape()[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in t.values_mut() {
                    *v = rng.random_range(-a..a);
                }
            }
        }
    }

    /// Sets the CTR head bias to `logit(click_rate)` and the teacher and
    /// student head biases to `logit(cvr_given_click)`, so training starts at
    /// the base rates. Rates are clamped to `[1e-4, 1 - 1e-4]`.
    pub fn set_output_priors(&mut self, click_rate: f64, cvr_given_click: f64) {
        let logit = |p: f64| {
            let p = p.clamp(1e-4, 1.0 - 1e-4);
            (p / (1.0 - p)).ln()
        };
        let heads = [
            (self.ctr.head.b, logit(click_rate)),
            (self.teacher.head.b, logit(cvr_given_click)),
            (self.student.head.b, logit(cvr_given_click)),
        ];
        for (id, v) in heads {
            self.params.get_mut(id).values_mut().fill(v);
        }
    }

    /// Parameter ids of the CVR teacher: its tower, gate and conditioner.
    pub fn teacher_param_ids(&self) -> Vec<ParamId> {
        let mut ids = tower_ids(&self.teacher);
        ids.extend([self.gates[1].w, self.gates[1].b]);
        if let Some(c) = &self.conditioner {
            ids.extend([c.w, c.b]);
        }
        ids
    }

    pub fn ctr_param_ids(&self) -> Vec<ParamId> {
        let mut ids = tower_ids(&self.ctr);
        ids.extend([self.gates[0].w, self.gates[0].b]);
        ids
    }

    pub fn student_param_ids(&self) -> Vec<ParamId> {
        let mut ids = tower_ids(&self.student);
        ids.extend([self.gates[2].w, self.gates[2].b]);
        ids
    }

    pub fn embedding_ids(&self) -> &[ParamId] {
        &self.embeddings
    }

    pub fn conditioner_ids(&self) -> Option<(ParamId, ParamId)> {
        self.conditioner.as_ref().map(|c| (c.w, c.b))
    }

    /// Variational scale `σ = softplus(ρ)` of each transfer pair.
    pub fn variational_sigmas(&self) -> Vec<Vec<f64>> {
        self.variational
            .iter()
            .map(|p| {
                self.params
                    .get(p.rho)
                    .values()
                    .iter()
                    .map(|&r| crate::diffcore::softplus_scalar(r))
                    .collect()
            })
            .collect()
    }

    pub fn forward(&self, batch: &[&[u32]]) -> Result<Forward, ModelError> {
        self.forward_with_propensity(batch, None)
    }

    /// Forward pass; `propensity` overrides the CTR tower output fed to the
    /// conditioner (the CTR prediction itself is unchanged).
    pub fn forward_with_propensity(
        &self,
        batch: &[&[u32]],
        propensity: Option<&[f64]>,
    ) -> Result<Forward, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let m = batch.len();
        let fields = self.cfg.cardinalities.len();
        for (i, row) in batch.iter().enumerate() {
            if row.len() != fields {
                return Err(ModelError::Schema(format!(
                    "record {i} has {} fields, model expects {fields}",
                    row.len()
                )));
            }
            for (f, (&c, &card)) in row.iter().zip(&self.cfg.cardinalities).enumerate() {
                if c as usize >= card {
                    return Err(ModelError::Schema(format!(
                        "record {i} field {f}: category {c} >= cardinality {card}"
                    )));
                }
            }
        }
        let mut ctx = Binder::new(&self.params);

        let mut parts = Vec::with_capacity(fields);
        for (f, &table) in self.embeddings.iter().enumerate() {
            let ids: Vec<usize> = batch.iter().map(|r| r[f] as usize).collect();
            let t = ctx.bind(table);
            parts.push(ctx.graph.gather(t, &ids)?);
        }
        let x = ctx.graph.concat_cols(&parts)?;

        let mut expert_out = Vec::with_capacity(self.experts.len());
        for e in &self.experts {
            let z = e.apply(&mut ctx, x)?;
            expert_out.push(ctx.graph.relu(z));
        }
        let mut mixtures = Vec::with_capacity(3);
        for gate in &self.gates {
            let logits = gate.apply(&mut ctx, x)?;
            let weights = ctx.graph.softmax(logits);
            let mut mix: Option<Var> = None;
            for (j, &eo) in expert_out.iter().enumerate() {
                let wj = ctx.graph.slice_col(weights, j)?;
                let term = ctx.graph.mul_col(eo, wj)?;
                mix = Some(match mix {
                    None => term,
                    Some(acc) => ctx.graph.add(acc, term)?,
                });
            }
            mixtures.push(mix.expect("at least one expert"));
        }

        let ctr_taps = self.ctr.learn(&mut ctx, mixtures[0])?;
        let ctr_logit = self.ctr.head.apply(&mut ctx, *ctr_taps.last().unwrap())?;
        let p_ctr = ctx.graph.sigmoid(ctr_logit);
        let p_ctr_detached = ctx.graph.detach(p_ctr);

        let teacher_all = self.teacher.learn(&mut ctx, mixtures[1])?;
        let h = *teacher_all.last().unwrap();
        let teacher_repr = match &self.conditioner {
            Some(cond) => {
                let prop = match propensity {
                    Some(p) => {
                        if p.len() != m {
                            return Err(ModelError::Schema(format!(
                                "propensity override has {} values for {m} records",
                                p.len()
                            )));
                        }
                        ctx.graph.constant(Tensor::column(p.to_vec()))
                    }
                    None => p_ctr_detached,
                };
                let c = cond.apply(&mut ctx, prop)?;
                ctx.graph.outer(c, h)?
            }
            None => h,
        };
        let t_logit = self.teacher.head.apply(&mut ctx, teacher_repr)?;
        let p_cvr_teacher = ctx.graph.sigmoid(t_logit);

        let student_all = self.student.learn(&mut ctx, mixtures[2])?;
        let s_logit = self
            .student
            .head
            .apply(&mut ctx, *student_all.last().unwrap())?;
        let p_cvr_student = ctx.graph.sigmoid(s_logit);

        let p_imputation = match &self.imputation {
            Some(tower) => {
                let taps = tower.learn(&mut ctx, mixtures[2])?;
                let logit = tower.head.apply(&mut ctx, *taps.last().unwrap())?;
                Some(ctx.graph.softplus(logit))
            }
            None => None,
        };

        let skip = self.cfg.tower_hidden.len() - self.cfg.transfer_layers;
        let out = ForwardOut {
            p_ctr,
            p_ctr_detached,
            p_cvr_teacher,
            p_cvr_student,
            teacher_taps: teacher_all[skip..].to_vec(),
            student_taps: student_all[skip..].to_vec(),
            student_input: mixtures[2],
            p_imputation,
            batch_size: m,
        };
        Ok(Forward {
            graph: ctx.graph,
            out,
            bound: ctx.bound,
        })
    }

    /// Binds the variational heads into an existing forward graph, returning
    /// `(μ_k(s), σ_k)` per transfer pair. The student taps are recomputed
    /// from a detached copy of the student's expert mixture, so the
    /// transfer term shapes the student learner but not the shared
    /// embeddings, experts or gates.
    pub fn variational_terms(&self, fwd: &mut Forward) -> Result<Vec<(Var, Var)>, ModelError> {
        let mut ctx = Binder {
            graph: std::mem::take(&mut fwd.graph),
            store: &self.params,
            bound: std::mem::take(&mut fwd.bound),
        };
        let mut terms = Vec::with_capacity(self.variational.len());
        let skip = self.cfg.tower_hidden.len() - self.cfg.transfer_layers;
        let input = fwd.out.student_input;
        let result = (|| -> Result<(), DiffError> {
            let cut = ctx.graph.detach(input);
            let taps = self.student.learn(&mut ctx, cut)?;
            for (pair, &s) in self.variational.iter().zip(&taps[skip..]) {
                let mu = pair.mean.apply(&mut ctx, s)?;
                let rho = ctx.bind(pair.rho);
                let sigma = ctx.graph.softplus(rho);
                terms.push((mu, sigma));
            }
            Ok(())
        })();
        fwd.graph = ctx.graph;
        fwd.bound = ctx.bound;
        result?;
        Ok(terms)
    }

    /// Batched inference over `records`, in blocks of `chunk`.
    pub fn predict(&self, batch: &[&[u32]], chunk: usize) -> Result<Predictions, ModelError> {
        let mut out = Predictions::default();
        for block in batch.chunks(chunk.max(1)) {
            let fwd = self.forward(block)?;
            out.ctr.extend_from_slice(fwd.values(fwd.out.p_ctr));
            out.cvr_teacher
                .extend_from_slice(fwd.values(fwd.out.p_cvr_teacher));
            out.cvr_student
                .extend_from_slice(fwd.values(fwd.out.p_cvr_student));
        }
        Ok(out)
    }
}

fn tower_ids(t: &Tower) -> Vec<ParamId> {
    t.layers
        .iter()
        .chain(std::iter::once(&t.head))
        .flat_map(|l| [l.w, l.b])
        .collect()
}

/// Pseudo conversion labels `r*`: the teacher prediction detached from the graph.
pub fn pseudo_labels(graph: &mut Graph, out: &ForwardOut) -> Var {
    graph.detach(out.p_cvr_teacher)
}
