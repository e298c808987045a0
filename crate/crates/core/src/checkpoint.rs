//! Plain-text checkpoints.
//!
//! Layout, one record per line:
//!
//! ```text
//! slotadapt-checkpoint 1
//! kind adapt
//! step 120
//! rng <seed> <stream> <word_pos>
//! config <lines>
//! <key = value> ...
//! params student <count>
//! param <name> <rows> <cols>
//! <values>
//! ...
//! memory <classes> <dim> <beta> <tau>
//! proto <class> <0|1> <values>
//! trace <rows>
//! <csv rows>
//! sha256 <hex digest of every preceding line>
//! end
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adaptation::{AdaptState, AdaptTrace};
use crate::cgsc::PrototypeMemory;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamSet;
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;

pub const FORMAT: &str = "slotadapt-checkpoint";
pub const VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Pretrain,
    Adapt,
}

impl CheckpointKind {
    fn name(self) -> &'static str {
        match self {
            CheckpointKind::Pretrain => "pretrain",
            CheckpointKind::Adapt => "adapt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub step: usize,
    pub rng: RngState,
    /// Named parameter sets: `model` for pretraining, `student` and
    /// `teacher` for adaptation.
    pub params: Vec<(String, ParamSet)>,
    pub memory: Option<PrototypeMemory>,
    pub trace: Vec<AdaptTrace>,
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

impl Checkpoint {
    pub fn pretrained(config: &RunConfig, params: ParamSet, step: usize) -> Self {
        Self {
            kind: CheckpointKind::Pretrain,
            config: config.clone(),
            step,
            rng: Rng::substream(config.seed, step as u64).state(),
            params: vec![("model".into(), params)],
            memory: None,
            trace: Vec::new(),
        }
    }

    pub fn from_adapt(config: &RunConfig, state: &AdaptState) -> Self {
        Self {
            kind: CheckpointKind::Adapt,
            config: config.clone(),
            step: state.step,
            rng: Rng::substream(state.seed, state.step as u64).state(),
            params: vec![("student".into(), state.student.clone()), ("teacher".into(), state.teacher.clone())],
            memory: Some(state.memory.clone()),
            trace: state.trace.clone(),
        }
    }

    pub fn params(&self, role: &str) -> Result<&ParamSet> {
        self.params
            .iter()
            .find(|(r, _)| r == role)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("no `{role}` parameters")))
    }

    /// Parameters a pretrain checkpoint hands to adaptation: the model of a
    /// pretrain checkpoint, the student of an adapt checkpoint.
    pub fn primary_params(&self) -> Result<&ParamSet> {
        match self.kind {
            CheckpointKind::Pretrain => self.params("model"),
            CheckpointKind::Adapt => self.params("student"),
        }
    }

    pub fn adapt_state(&self) -> Result<AdaptState> {
        if self.kind != CheckpointKind::Adapt {
            return Err(Error::CheckpointCorrupt("not an adaptation checkpoint".into()));
        }
        let memory = self.memory.clone().ok_or_else(|| Error::CheckpointCorrupt("missing prototype memory".into()))?;
        Ok(AdaptState {
            student: self.params("student")?.clone(),
            teacher: self.params("teacher")?.clone(),
            memory,
            step: self.step,
            seed: self.rng.seed,
            trace: self.trace.clone(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut body = String::new();
        let _ = writeln!(body, "{FORMAT} {VERSION}");
        let _ = writeln!(body, "kind {}", self.kind.name());
        let _ = writeln!(body, "step {}", self.step);
        let _ = writeln!(body, "rng {} {} {}", self.rng.seed, self.rng.stream, self.rng.word_pos);
        let config = self.config.to_text();
        let _ = writeln!(body, "config {}", config.lines().count());
        body.push_str(&config);
        for (role, params) in &self.params {
            let _ = writeln!(body, "params {role} {}", params.len());
            for (name, t) in params.iter() {
                let _ = writeln!(body, "param {name} {} {}", t.rows(), t.cols());
                let values: Vec<String> = t.data().iter().map(|&v| float(v)).collect();
                let _ = writeln!(body, "{}", values.join(" "));
            }
        }
        if let Some(m) = &self.memory {
            let _ = writeln!(body, "memory {} {} {} {}", m.classes(), m.prototypes.cols(), float(m.beta), float(m.tau));
            for c in 1..=m.classes() {
                let values: Vec<String> = m.prototypes.row_slice(c - 1).iter().map(|&v| float(v)).collect();
                let _ = writeln!(body, "proto {c} {} {}", m.initialized[c - 1] as u8, values.join(" "));
            }
        }
        let _ = writeln!(body, "trace {}", self.trace.len());
        for r in &self.trace {
            let delta = r.delta.map(float).unwrap_or_else(|| "-".into());
            let _ = write!(
                body,
                "{} {} {} {} {} {} {} {} {} {} {}",
                r.step,
                float(r.tau),
                r.pseudo_labels,
                r.background_only,
                float(r.l_unsup),
                float(r.l_rec),
                float(r.l_con),
                r.con_images,
                r.single_class,
                delta,
                r.burn_in as u8
            );
            for n in &r.prototype_norms {
                body.push(' ');
                body.push_str(&n.map(float).unwrap_or_else(|| "-".into()));
            }
            body.push('\n');
        }
        let digest = hex(&Sha256::digest(body.as_bytes()));
        let _ = writeln!(body, "sha256 {digest}");
        body.push_str("end\n");
        body
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let header = lines.next("header")?;
        let (format, version) = header.split_once(' ').unwrap_or((header, ""));
        if format != FORMAT {
            return Err(Error::CheckpointCorrupt(format!("not a checkpoint (header {header:?})")));
        }
        if version != VERSION {
            return Err(Error::CheckpointVersion { expected: VERSION.into(), found: version.into() });
        }
        // Check framing and digest before interpreting anything else, so a
        // damaged file never yields partial state.
        let trimmed = text.strip_suffix('\n').unwrap_or(text);
        if !trimmed.ends_with("\nend") {
            return Err(Error::CheckpointTruncated("missing end marker".into()));
        }
        let body_end = trimmed.len() - "end".len();
        let without_end = &text[..body_end];
        let digest_start = without_end.trim_end_matches('\n').rfind('\n').map(|i| i + 1).unwrap_or(0);
        let digest_line = without_end[digest_start..].trim_end();
        let expected = digest_line.strip_prefix("sha256 ").ok_or_else(|| Error::CheckpointTruncated("missing digest line".into()))?;
        let actual = hex(&Sha256::digest(&text.as_bytes()[..digest_start]));
        if actual != expected {
            return Err(Error::CheckpointCorrupt("digest mismatch".into()));
        }

        let kind = match lines.field("kind")? {
            "pretrain" => CheckpointKind::Pretrain,
            "adapt" => CheckpointKind::Adapt,
            other => return Err(Error::CheckpointCorrupt(format!("unknown kind {other:?}"))),
        };
        let step = parse(lines.field("step")?)?;
        let rng_fields: Vec<&str> = lines.field("rng")?.split(' ').collect();
        if rng_fields.len() != 3 {
            return Err(Error::CheckpointCorrupt("rng needs seed, stream and position".into()));
        }
        let rng = RngState { seed: parse(rng_fields[0])?, stream: parse(rng_fields[1])?, word_pos: parse(rng_fields[2])? };
        let n_config: usize = parse(lines.field("config")?)?;
        let mut config_text = String::new();
        for _ in 0..n_config {
            config_text.push_str(lines.next("config")?);
            config_text.push('\n');
        }
        let config = RunConfig::parse(&config_text, &[])?;

        let roles = match kind {
            CheckpointKind::Pretrain => 1,
            CheckpointKind::Adapt => 2,
        };
        let mut params = Vec::with_capacity(roles);
        for _ in 0..roles {
            let head = lines.field("params")?;
            let (role, count) = head.split_once(' ').ok_or_else(|| Error::CheckpointCorrupt("bad params line".into()))?;
            let count: usize = parse(count)?;
            let mut set = ParamSet::new();
            for _ in 0..count {
                let fields: Vec<&str> = lines.field("param")?.split(' ').collect();
                if fields.len() != 3 {
                    return Err(Error::CheckpointCorrupt("param needs name, rows, cols".into()));
                }
                let (rows, cols): (usize, usize) = (parse(fields[1])?, parse(fields[2])?);
                let values = floats(lines.next("values")?)?;
                if values.len() != rows * cols {
                    return Err(Error::CheckpointCorrupt(format!("`{}` holds {} values for {rows}x{cols}", fields[0], values.len())));
                }
                set.insert(fields[0], Tensor::matrix(rows, cols, values)?);
            }
            params.push((role.to_string(), set));
        }

        let mut memory = None;
        if kind == CheckpointKind::Adapt {
            let head: Vec<&str> = lines.field("memory")?.split(' ').collect();
            if head.len() != 4 {
                return Err(Error::CheckpointCorrupt("memory needs classes, dim, beta, tau".into()));
            }
            let (classes, dim): (usize, usize) = (parse(head[0])?, parse(head[1])?);
            let mut m = PrototypeMemory::new(classes, dim, parse(head[2])?, parse(head[3])?)?;
            for c in 1..=classes {
                let rest = lines.field("proto")?;
                let mut parts = rest.splitn(3, ' ');
                let idx: usize = parse(parts.next().unwrap_or(""))?;
                if idx != c {
                    return Err(Error::CheckpointCorrupt(format!("prototype {idx} out of order")));
                }
                m.initialized[c - 1] = parts.next() == Some("1");
                let values = floats(parts.next().unwrap_or(""))?;
                if values.len() != dim {
                    return Err(Error::CheckpointCorrupt(format!("prototype {c} has {} values", values.len())));
                }
                for (j, v) in values.into_iter().enumerate() {
                    m.prototypes.set(c - 1, j, v);
                }
            }
            memory = Some(m);
        }

        let n_trace: usize = parse(lines.field("trace")?)?;
        let mut trace = Vec::with_capacity(n_trace);
        for _ in 0..n_trace {
            let f: Vec<&str> = lines.next("trace row")?.split(' ').collect();
            if f.len() < 11 {
                return Err(Error::CheckpointCorrupt("trace row needs at least 11 fields".into()));
            }
            let opt = |v: &str| -> Result<Option<f64>> {
                if v == "-" {
                    Ok(None)
                } else {
                    parse(v).map(Some)
                }
            };
            trace.push(AdaptTrace {
                step: parse(f[0])?,
                tau: parse(f[1])?,
                pseudo_labels: parse(f[2])?,
                background_only: parse(f[3])?,
                l_unsup: parse(f[4])?,
                l_rec: parse(f[5])?,
                l_con: parse(f[6])?,
                con_images: parse(f[7])?,
                single_class: parse(f[8])?,
                delta: opt(f[9])?,
                burn_in: f[10] == "1",
                prototype_norms: f[11..].iter().map(|v| opt(v)).collect::<Result<_>>()?,
            });
        }
        Ok(Self { kind, config, step, rng, params, memory, trace })
    }

    /// Confirms every stored parameter set has exactly the layout the stored
    /// configuration produces.
    pub fn check_shapes(&self) -> Result<()> {
        let model = Model::new(self.config.model)?;
        let expected = model.init(&mut Rng::new(0));
        for (_, params) in &self.params {
            for (name, t) in expected.iter() {
                let found = params.get(name).map_err(|_| Error::CheckpointShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: Vec::new(),
                })?;
                if found.shape() != t.shape() {
                    return Err(Error::CheckpointShape { name: name.clone(), expected: t.shape().to_vec(), found: found.shape().to_vec() });
                }
            }
            if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
                return Err(Error::CheckpointShape {
                    name: extra.clone(),
                    expected: Vec::new(),
                    found: params.get(extra)?.shape().to_vec(),
                });
            }
        }
        if let Some(m) = &self.memory {
            let want = [self.config.model.detector.classes, self.config.model.detector.query_dim];
            if m.prototypes.shape() != want {
                return Err(Error::CheckpointShape {
                    name: "memory".into(),
                    expected: want.to_vec(),
                    found: m.prototypes.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        // Write then rename so a crash never leaves a half-written file under
        // the final name.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_text())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing { what: "checkpoint", path: path.to_path_buf() },
            _ => Error::Io(e),
        })?;
        let ckpt = Self::from_text(&text)?;
        ckpt.check_shapes()?;
        Ok(ckpt)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::CheckpointCorrupt(format!("cannot parse {s:?}")))
}

fn floats(line: &str) -> Result<Vec<f64>> {
    if line.trim().is_empty() {
        return Ok(Vec::new());
    }
    line.split(' ').map(parse).collect()
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { inner: text.lines() }
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.inner.next().ok_or_else(|| Error::CheckpointTruncated(format!("ended before {what}")))
    }

    /// Next line, which must start with `name `; returns the remainder.
    fn field(&mut self, name: &str) -> Result<&'a str> {
        let line = self.next(name)?;
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::CheckpointCorrupt(format!("expected `{name}`, found {:?}", line.split(' ').next().unwrap_or(""))))
    }
}
