//! Full network: backbone, AU crops, relation modules and prediction heads.

use serde::{Deserialize, Serialize};

use crate::au_region::{self, AUFeatureSet, AuCenterTable, RegionConfig};
use crate::backbone::{self, BackboneConfig};
use crate::checkpoint::sha256_raw;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::relation::{attention, bilstm, hopfield, AttentionConfig, BiLstmConfig, HopfieldConfig};
use crate::rng::SeededRng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const AU_HEAD: &str = "head.au";

/// AU list of the 12-AU benchmark layout.
pub const BP4D_AUS: [u32; 12] = [1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24];
/// AU list of the 8-AU intensity-coded layout.
pub const DISFA_AUS: [u32; 8] = [1, 2, 4, 6, 9, 12, 25, 26];

/// Which relation modules sit between the AU crops and the AU head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// No relation learning.
    None,
    Bilstm,
    Attention,
    Hopfield,
    /// BiLSTM, then attention, then Hopfield.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::Bilstm,
        Ablation::Attention,
        Ablation::Hopfield,
        Ablation::Full,
    ];

    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            Ablation::None => (false, false, false),
            Ablation::Bilstm => (true, false, false),
            Ablation::Attention => (false, true, false),
            Ablation::Hopfield => (false, false, true),
            Ablation::Full => (true, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Bilstm => "bilstm",
            Ablation::Attention => "attention",
            Ablation::Hopfield => "hopfield",
            Ablation::Full => "full",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (none|bilstm|attention|hopfield|full)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// AU labels in ascending order.
    pub aus: Vec<u32>,
    /// Sequence order seen by the relation modules; ascending when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub au_order: Option<Vec<u32>>,
    pub region: RegionConfig,
    /// Overrides the built-in center rules.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub au_centers: Option<AuCenterTable>,
    pub use_bilstm: bool,
    pub use_attention: bool,
    pub use_hopfield: bool,
    pub bilstm: BiLstmConfig,
    pub attention: AttentionConfig,
    pub hopfield: HopfieldConfig,
    pub lambda_lm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            aus: BP4D_AUS.to_vec(),
            au_order: None,
            region: RegionConfig::default(),
            au_centers: None,
            use_bilstm: true,
            use_attention: true,
            use_hopfield: true,
            bilstm: BiLstmConfig::default(),
            attention: AttentionConfig::default(),
            hopfield: HopfieldConfig::default(),
            lambda_lm: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        (self.use_bilstm, self.use_attention, self.use_hopfield) = ablation.switches();
        self
    }

    pub fn ablation(&self) -> Option<Ablation> {
        let s = (self.use_bilstm, self.use_attention, self.use_hopfield);
        Ablation::ALL.into_iter().find(|a| a.switches() == s)
    }

    pub fn uses_relations(&self) -> bool {
        self.use_bilstm || self.use_attention || self.use_hopfield
    }

    pub fn center_table(&self) -> Result<AuCenterTable> {
        match &self.au_centers {
            Some(t) => Ok(t.clone()),
            None => AuCenterTable::default_for(self.region.landmark_count),
        }
    }

    /// Positions of `aus` in relation order.
    pub fn relation_order(&self) -> Result<Option<Vec<usize>>> {
        let Some(order) = &self.au_order else {
            return Ok(None);
        };
        let mut sorted = order.clone();
        sorted.sort_unstable();
        let mut expected = self.aus.clone();
        expected.sort_unstable();
        if sorted != expected {
            return Err(Error::Config(format!(
                "au_order {order:?} is not a permutation of the AU list {:?}",
                self.aus
            )));
        }
        let idx: Vec<usize> = order
            .iter()
            .map(|au| self.aus.iter().position(|a| a == au).unwrap())
            .collect();
        Ok(if idx.iter().enumerate().all(|(i, &j)| i == j) { None } else { Some(idx) })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.aus.is_empty() {
            return Err(Error::Config("AU list is empty".into()));
        }
        if self.aus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("AU list {:?} must be strictly ascending", self.aus)));
        }
        let (_, hf, wf) = self.backbone.head_shape();
        let (ch, cw) = self.region.crop;
        if ch > hf || cw > wf || ch == 0 || cw == 0 {
            return Err(Error::Config(format!("crop {ch}x{cw} larger than feature map {hf}x{wf}")));
        }
        if ch % 2 != 0 || cw % 2 != 0 {
            return Err(Error::Config(format!("crop {ch}x{cw} must have even extents")));
        }
        if self.region.d_au == 0 || self.region.landmark_count == 0 {
            return Err(Error::Config("d_au and landmark count must be positive".into()));
        }
        self.center_table()?.validate(&self.aus, self.region.landmark_count)?;
        self.relation_order()?;
        if self.use_attention {
            self.attention.validate()?;
        }
        if self.use_hopfield {
            self.hopfield.validate()?;
        }
        if self.use_bilstm && self.bilstm.hidden == 0 {
            return Err(Error::Config("BiLSTM hidden size must be positive".into()));
        }
        if !(self.lambda_lm >= 0.0 && self.lambda_lm.is_finite()) {
            return Err(Error::Config(format!("lambda_lm = {} must be >= 0", self.lambda_lm)));
        }
        Ok(())
    }

    /// Digest of everything the stage-1 parameters depend on. Relation
    /// settings are excluded so one stage-1 run can feed any ablation.
    pub fn extractor_digest(&self) -> Result<[u8; 32]> {
        #[derive(Serialize)]
        struct Extractor<'a> {
            backbone: &'a BackboneConfig,
            aus: &'a [u32],
            region: &'a RegionConfig,
            au_centers: AuCenterTable,
        }
        let e = Extractor {
            backbone: &self.backbone,
            aus: &self.aus,
            region: &self.region,
            au_centers: self.center_table()?,
        };
        let json = serde_json::to_vec(&e).map_err(|e| Error::Config(e.to_string()))?;
        Ok(sha256_raw(&json))
    }

    pub fn head_input_dim(&self) -> usize {
        let (c, h, w) = self.backbone.head_shape();
        2 * c * h * w + self.aus.len() * self.region.d_au
    }
}

/// Per-module modes and whether relation modules run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plan {
    pub extractor: Mode,
    pub relation: Mode,
    pub relations: bool,
}

impl Plan {
    pub const STAGE1: Plan = Plan {
        extractor: Mode::Train,
        relation: Mode::Eval,
        relations: false,
    };
    pub const STAGE2: Plan = Plan {
        extractor: Mode::Eval,
        relation: Mode::Train,
        relations: true,
    };
    pub const EVAL_STAGE1: Plan = Plan {
        extractor: Mode::Eval,
        relation: Mode::Eval,
        relations: false,
    };
    pub const EVAL: Plan = Plan {
        extractor: Mode::Eval,
        relation: Mode::Eval,
        relations: true,
    };
}

pub struct Output {
    /// `[N, n_au]` occurrence probabilities.
    pub probs: Var,
    /// `[N, L, 2]` predicted landmark coordinates.
    pub landmarks: Var,
    /// AU features after the relation modules.
    pub aus: AUFeatureSet,
}

/// Names the stage-2 freeze covers: backbone and AU refinement blocks.
pub fn frozen_prefixes() -> [&'static str; 2] {
    ["backbone.", "au_region.refine."]
}

pub fn relation_prefixes() -> [&'static str; 3] {
    [bilstm::PREFIX, attention::PREFIX, hopfield::PREFIX]
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    table: AuCenterTable,
}

impl Model {
    /// Fresh extractor and head parameters; relation modules are added by
    /// [`Model::init_relations`].
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = SeededRng::new(seed).split("init");
        let mut params = ParamStore::new();
        backbone::init(&config.backbone, &mut params, &rng);
        au_region::init(
            &config.region,
            &config.aus,
            config.backbone.head_shape(),
            &mut params,
            &rng,
        );
        params.init_linear(&rng, AU_HEAD, config.head_input_dim(), config.aus.len());
        let table = config.center_table()?;
        Ok(Self {
            config,
            params,
            table,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let table = config.center_table()?;
        let model = Self {
            config,
            params,
            table,
        };
        model.check_params()?;
        Ok(model)
    }

    /// Like [`Model::from_params`] without the coverage check.
    pub fn from_params_unchecked(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let table = config.center_table()?;
        Ok(Self {
            config,
            params,
            table,
        })
    }

    /// Initialize every enabled relation module whose parameters are absent.
    pub fn init_relations(&mut self, seed: u64) {
        let rng = SeededRng::new(seed).split("init");
        let d_au = self.config.region.d_au;
        let c = &self.config;
        if c.use_bilstm && !self.params.contains(&format!("{}.out.bias", bilstm::PREFIX)) {
            bilstm::init(&c.bilstm, d_au, &mut self.params, &rng);
        }
        if c.use_attention && !self.params.contains(&format!("{}.post.bias", attention::PREFIX)) {
            attention::init(&c.attention, d_au, &mut self.params, &rng);
        }
        if c.use_hopfield && !self.params.contains(&format!("{}.post.bias", hopfield::PREFIX)) {
            hopfield::init(&c.hopfield, d_au, &mut self.params, &rng);
        }
    }

    /// Whether the stored parameters cover the extractor and every enabled module.
    pub fn check_params(&self) -> Result<()> {
        self.check_coverage(true)
    }

    /// [`Model::check_params`], optionally skipping the relation modules.
    pub fn check_coverage(&self, relations: bool) -> Result<()> {
        let mut required = vec![
            format!("{}.init.weight", backbone::PATCH),
            format!("{}.weight", au_region::LANDMARK_HEAD),
            format!("{AU_HEAD}.weight"),
        ];
        let c = &self.config;
        if relations && c.use_bilstm {
            required.push(format!("{}.out.bias", bilstm::PREFIX));
        }
        if relations && c.use_attention {
            required.push(format!("{}.post.bias", attention::PREFIX));
        }
        if relations && c.use_hopfield {
            required.push(format!("{}.post.bias", hopfield::PREFIX));
        }
        for name in required {
            if !self.params.contains(&name) {
                return Err(Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")));
            }
        }
        let head = self.params.get(&format!("{AU_HEAD}.weight"))?;
        if head.shape() != [c.aus.len(), c.head_input_dim()] {
            return Err(Error::Checkpoint(format!(
                "AU head {:?} does not match config ({} AUs, input {})",
                head.shape(),
                c.aus.len(),
                c.head_input_dim()
            )));
        }
        Ok(())
    }

    pub fn table(&self) -> &AuCenterTable {
        &self.table
    }

    /// `(global, landmark)` head features of `[N,C,H,W]` images.
    pub fn features(&self, fwd: &mut Forward<'_>, images: Var, mode: Mode) -> Result<(Var, Var)> {
        backbone::forward(fwd, &self.config.backbone, images, mode)
    }

    fn relations(&self, fwd: &mut Forward<'_>, aus: AUFeatureSet, mode: Mode) -> Result<AUFeatureSet> {
        let c = &self.config;
        let order = c.relation_order()?;
        let mut aus = match &order {
            Some(idx) => permute(&mut fwd.tape, &aus, idx)?,
            None => aus,
        };
        if c.use_bilstm {
            aus = bilstm::bilstm_forward(fwd, &aus, &c.bilstm)?;
        }
        if c.use_attention {
            aus = attention::encode_stack(fwd, &aus, &c.attention, mode)?;
        }
        if c.use_hopfield {
            aus = hopfield::hopfield_forward(fwd, &aus, &c.hopfield, mode)?;
        }
        if let Some(idx) = &order {
            let mut inverse = vec![0; idx.len()];
            for (i, &j) in idx.iter().enumerate() {
                inverse[j] = i;
            }
            aus = permute(&mut fwd.tape, &aus, &inverse)?;
        }
        Ok(aus)
    }

    pub fn forward_from_features(
        &self,
        fwd: &mut Forward<'_>,
        global: Var,
        landmark_feature: Var,
        plan: Plan,
    ) -> Result<Output> {
        let c = &self.config;
        let landmarks = au_region::predict_landmarks(fwd, landmark_feature, c.region.landmark_count)?;
        let centers = au_region::landmark_sets(fwd.tape.value(landmarks))
            .iter()
            .map(|lms| self.table.centers(lms, &c.aus))
            .collect::<Result<Vec<_>>>()?;
        let mut aus = au_region::crop_au_features(fwd, global, &centers, &c.region, &c.aus, plan.extractor)?;
        if plan.relations && c.uses_relations() {
            aus = self.relations(fwd, aus, plan.relation)?;
        }
        let probs = predict_au_occurrence(fwd, global, landmark_feature, &aus)?;
        Ok(Output {
            probs,
            landmarks,
            aus,
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, images: Var, plan: Plan) -> Result<Output> {
        let (g, l) = self.features(fwd, images, plan.extractor)?;
        self.forward_from_features(fwd, g, l, plan)
    }
}

fn permute(tape: &mut Tape, aus: &AUFeatureSet, idx: &[usize]) -> Result<AUFeatureSet> {
    let parts = idx
        .iter()
        .map(|&i| tape.slice(aus.features, 1, i, 1))
        .collect::<Result<Vec<_>>>()?;
    let features = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? };
    Ok(AUFeatureSet {
        features,
        au_ids: idx.iter().map(|&i| aus.au_ids[i]).collect(),
    })
}

/// Flatten both head features, append every AU vector, linear + sigmoid.
pub fn predict_au_occurrence(
    fwd: &mut Forward<'_>,
    global: Var,
    landmark_feature: Var,
    aus: &AUFeatureSet,
) -> Result<Var> {
    let n = fwd.tape.shape(global)[0];
    let flat = |tape: &mut Tape, v: Var| {
        let len = tape.value(v).len() / n;
        tape.reshape(v, &[n, len])
    };
    let g = flat(&mut fwd.tape, global)?;
    let l = flat(&mut fwd.tape, landmark_feature)?;
    let a = flat(&mut fwd.tape, aus.features)?;
    let x = fwd.tape.concat(&[g, l, a], 1)?;
    let logits = fwd.linear(x, AU_HEAD)?;
    Ok(fwd.tape.sigmoid(logits))
}

/// Mean clamped binary cross-entropy over every AU of every sample.
pub fn au_loss(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data(format!("AU label {bad} is not 0 or 1")));
    }
    if labels.len() != tape.value(probs).len() {
        return Err(Error::Data(format!(
            "{} labels for {} predictions",
            labels.len(),
            tape.value(probs).len()
        )));
    }
    tape.bce(probs, labels)
}

/// Mean squared Euclidean distance per landmark; `truth` is flat `x, y` pairs.
pub fn landmark_loss(tape: &mut Tape, pred: Var, truth: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let n_points = tape.value(pred).len() / 2;
    if truth.len() != 2 * n_points {
        return Err(Error::Data(format!(
            "{} ground-truth landmarks for {n_points} predicted",
            truth.len() / 2
        )));
    }
    let t = tape.constant(Tensor::new(&shape, truth.to_vec())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n_points as f64))
}

/// `au_loss + lambda · landmark_loss`.
pub fn total_loss(
    tape: &mut Tape,
    out: &Output,
    labels: &[f64],
    landmarks: &[f64],
    lambda: f64,
) -> Result<Var> {
    let a = au_loss(tape, out.probs, labels)?;
    if lambda == 0.0 {
        return Ok(a);
    }
    let l = landmark_loss(tape, out.landmarks, landmarks)?;
    let l = tape.scale(l, lambda);
    tape.add(a, l)
}
