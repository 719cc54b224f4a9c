//! Template-based VHDL emission.
//!
//! Every layer of an [`IntModel`] becomes one entity with a sequential MAC
//! (or one-element-per-cycle) datapath, its constants baked into ROMs. The
//! top level chains the layers through activation buffers with start/done
//! handshakes; the testbench replays golden vectors computed by
//! [`int_forward`] and demands exact equality.
//!
//! Templates live in `templates/` and use `{{name}}` placeholders.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hwmodel::{ConstraintStyle, PlatformSpec};
use crate::intrt::{int_forward, IntError, IntLinear, IntMatmul, IntModel, IntTensor};
use crate::intrt::{SOFTMAX_EXP_BITS, SOFTMAX_FRAC_BITS};
use crate::quant::{qmax, qmin};

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("template '{template}' has no value for placeholder '{name}'")]
    Unresolved { template: String, name: String },
    #[error("template '{0}' has an unterminated placeholder")]
    Malformed(String),
    #[error("unsupported layer '{0}'")]
    UnsupportedLayer(String),
    #[error("golden vectors: {0}")]
    Vectors(#[from] IntError),
    #[error("need at least {min} golden vectors, got {got}")]
    TooFewVectors { min: usize, got: usize },
    #[error("io error at {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("simulation failed: {summary}\n{log}")]
    Simulation { summary: String, log: String },
}

pub type Result<T> = std::result::Result<T, CodegenError>;

/// Minimum golden vectors per design.
pub const MIN_VECTORS: usize = 10;

const TEMPLATES: [(&str, &str); 12] = [
    ("package", include_str!("../templates/package.vhd.tpl")),
    ("linear", include_str!("../templates/linear.vhd.tpl")),
    ("matmul", include_str!("../templates/matmul.vhd.tpl")),
    ("pe_add", include_str!("../templates/pe_add.vhd.tpl")),
    ("softmax", include_str!("../templates/softmax.vhd.tpl")),
    ("residual", include_str!("../templates/residual.vhd.tpl")),
    ("batchnorm", include_str!("../templates/batchnorm.vhd.tpl")),
    ("gap", include_str!("../templates/gap.vhd.tpl")),
    ("top", include_str!("../templates/top.vhd.tpl")),
    ("testbench", include_str!("../templates/testbench.vhd.tpl")),
    ("xdc", include_str!("../templates/clock.xdc.tpl")),
    ("pdc", include_str!("../templates/clock.pdc.tpl")),
];

/// Plain-text template with `{{name}}` placeholders.
#[derive(Clone, Debug)]
pub struct RtlTemplate {
    pub name: &'static str,
    pub text: &'static str,
    pub required: Vec<String>,
}

impl RtlTemplate {
    pub fn new(name: &'static str, text: &'static str) -> Result<Self> {
        let mut required = Vec::new();
        let mut rest = text;
        while let Some(i) = rest.find("{{") {
            let tail = &rest[i + 2..];
            let j = tail
                .find("}}")
                .ok_or_else(|| CodegenError::Malformed(name.to_string()))?;
            let key = tail[..j].trim().to_string();
            if !required.contains(&key) {
                required.push(key);
            }
            rest = &tail[j + 2..];
        }
        Ok(Self {
            name,
            text,
            required,
        })
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (name, text) = TEMPLATES
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CodegenError::UnsupportedLayer(name.to_string()))?;
        Self::new(name, text)
    }

    /// Substitutes every placeholder; fails on any missing value.
    pub fn render(&self, values: &Values) -> Result<String> {
        if let Some(missing) = self.required.iter().find(|k| !values.0.contains_key(k.as_str())) {
            return Err(CodegenError::Unresolved {
                template: self.name.to_string(),
                name: missing.clone(),
            });
        }
        let mut out = String::with_capacity(self.text.len() * 2);
        let mut rest = self.text;
        while let Some(i) = rest.find("{{") {
            out.push_str(&rest[..i]);
            let tail = &rest[i + 2..];
            let j = tail.find("}}").expect("checked in new");
            out.push_str(&values.0[tail[..j].trim()]);
            rest = &tail[j + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Placeholder values.
#[derive(Clone, Debug, Default)]
pub struct Values(BTreeMap<String, String>);

impl Values {
    pub fn set(&mut self, key: &str, v: impl ToString) -> &mut Self {
        self.0.insert(key.to_string(), v.to_string());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtlFile {
    pub name: String,
    pub contents: String,
}

/// One golden vector: input codes (`n×m`, row-major) and the expected output
/// codes (`k`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenVector {
    pub input: Vec<i32>,
    pub output: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtlDesign {
    pub top: String,
    pub testbench: String,
    /// VHDL sources in analysis order: package, layers, top, testbench.
    pub files: Vec<RtlFile>,
    pub constraints: Vec<RtlFile>,
    pub vectors: Vec<GoldenVector>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Linear,
    PeAdd,
    MatmulNt,
    Matmul,
    Softmax,
    Residual,
    BatchNorm,
    Gap,
}

struct LayerDef {
    name: &'static str,
    kind: Kind,
    /// `(port prefix, buffer)` pairs read by the layer.
    reads: &'static [(&'static str, &'static str)],
    writes: &'static str,
}

const LAYERS: [LayerDef; 17] = [
    LayerDef { name: "input_proj", kind: Kind::Linear, reads: &[("x", "input")], writes: "h" },
    LayerDef { name: "pe_add", kind: Kind::PeAdd, reads: &[("x", "h")], writes: "emb" },
    LayerDef { name: "query", kind: Kind::Linear, reads: &[("x", "emb")], writes: "q" },
    LayerDef { name: "key", kind: Kind::Linear, reads: &[("x", "emb")], writes: "k" },
    LayerDef { name: "value", kind: Kind::Linear, reads: &[("x", "emb")], writes: "v" },
    LayerDef { name: "scores", kind: Kind::MatmulNt, reads: &[("a", "q"), ("b", "k")], writes: "s" },
    LayerDef { name: "softmax", kind: Kind::Softmax, reads: &[("x", "s")], writes: "p" },
    LayerDef { name: "context", kind: Kind::Matmul, reads: &[("a", "p"), ("b", "v")], writes: "ctx" },
    LayerDef { name: "attn_out", kind: Kind::Linear, reads: &[("x", "ctx")], writes: "ao" },
    LayerDef { name: "residual1", kind: Kind::Residual, reads: &[("a", "emb"), ("b", "ao")], writes: "r1" },
    LayerDef { name: "norm1", kind: Kind::BatchNorm, reads: &[("x", "r1")], writes: "n1" },
    LayerDef { name: "ff_up", kind: Kind::Linear, reads: &[("x", "n1")], writes: "f" },
    LayerDef { name: "ff_down", kind: Kind::Linear, reads: &[("x", "f")], writes: "f2" },
    LayerDef { name: "residual2", kind: Kind::Residual, reads: &[("a", "n1"), ("b", "f2")], writes: "r2" },
    LayerDef { name: "norm2", kind: Kind::BatchNorm, reads: &[("x", "r2")], writes: "n2" },
    LayerDef { name: "gap", kind: Kind::Gap, reads: &[("x", "n2")], writes: "pooled" },
    LayerDef { name: "head", kind: Kind::Linear, reads: &[("x", "pooled")], writes: "output" },
];

/// Names of the emitted layers, in execution order.
pub fn layer_names() -> Vec<&'static str> {
    LAYERS.iter().map(|l| l.name).collect()
}

pub fn entity_name(layer: &str) -> String {
    format!("qf_{layer}")
}

pub const TOP_ENTITY: &str = "qf_top";
pub const TB_ENTITY: &str = "qf_tb";
pub const PACKAGE_FILE: &str = "qforge_pkg.vhd";

fn buffer_depth(im: &IntModel, buffer: &str) -> usize {
    let c = &im.config;
    let (n, d) = (c.n, c.d_model);
    match buffer {
        "input" => n * c.m,
        "s" | "p" => n * n,
        "f" => n * 4 * d,
        "pooled" => d,
        "output" => c.k,
        _ => n * d,
    }
}

/// Address width for a buffer of `depth` entries (at least one bit).
pub fn addr_bits(depth: usize) -> usize {
    let mut b = 1;
    while (1usize << b) < depth {
        b += 1;
    }
    b
}

fn aw(im: &IntModel, buffer: &str) -> usize {
    addr_bits(buffer_depth(im, buffer))
}

/// VHDL array aggregate; single elements need named association.
fn aggregate<T: ToString>(values: impl IntoIterator<Item = T>) -> String {
    let items: Vec<String> = values.into_iter().map(|v| v.to_string()).collect();
    if items.len() == 1 {
        return format!("(0 => {})", items[0]);
    }
    let mut s = String::from("(");
    for (i, chunk) in items.chunks(16).enumerate() {
        if i > 0 {
            s.push_str(",\n    ");
        }
        s.push_str(&chunk.join(", "));
    }
    s.push(')');
    s
}

fn hex64(v: i64) -> String {
    format!("x\"{:016X}\"", v as u64)
}

fn base_values(im: &IntModel, def: &LayerDef) -> Values {
    let mut v = Values::default();
    v.set("name", def.name)
        .set("entity", entity_name(def.name))
        .set("bits", im.bits)
        .set("y_aw", aw(im, def.writes));
    for (port, buf) in def.reads {
        v.set(&format!("{port}_aw"), aw(im, buf));
    }
    v
}

fn linear_values(v: &mut Values, l: &IntLinear, rows: usize) {
    v.set("rows", rows)
        .set("in_f", l.in_features)
        .set("out_f", l.out_features)
        .set("weights", aggregate(&l.weight))
        .set("biases", aggregate(&l.bias))
        .set("x_zero", l.input_zero)
        .set("w_zero", l.weight_qparams.zero_point)
        .set("rq_mult", l.plan.multiplier)
        .set("rq_shift", l.plan.shift)
        .set("y_zero", l.plan.output.zero_point)
        .set("relu", l.relu);
}

fn matmul_values(v: &mut Values, mm: &IntMatmul, p: usize, q: usize, r: usize, transposed: bool) {
    v.set("p", p)
        .set("q", q)
        .set("r", r)
        .set("a_zero", mm.lhs_zero)
        .set("b_zero", mm.rhs_zero)
        .set("rq_mult", mm.plan.multiplier)
        .set("rq_shift", mm.plan.shift)
        .set("y_zero", mm.plan.output.zero_point);
    if transposed {
        v.set("b_index", "j * Q + t").set("b_layout", "b[j][t]");
    } else {
        v.set("b_index", "t * R + j").set("b_layout", "b[t][j]");
    }
}

/// Renders the entity for one layer of `im`.
pub fn emit_layer(im: &IntModel, layer: &str) -> Result<RtlFile> {
    let def = LAYERS
        .iter()
        .find(|l| l.name == layer)
        .ok_or_else(|| CodegenError::UnsupportedLayer(layer.to_string()))?;
    let c = &im.config;
    let (n, d) = (c.n, c.d_model);
    let mut v = base_values(im, def);
    let template = match def.kind {
        Kind::Linear => {
            let (l, rows) = match def.name {
                "input_proj" => (&im.input_proj, n),
                "query" => (&im.query, n),
                "key" => (&im.key, n),
                "value" => (&im.value, n),
                "attn_out" => (&im.attn_out, n),
                "ff_up" => (&im.ff_up, n),
                "ff_down" => (&im.ff_down, n),
                _ => (&im.head, 1),
            };
            linear_values(&mut v, l, rows);
            "linear"
        }
        Kind::PeAdd => {
            v.set("count", n * d).set("pe", aggregate(&im.pe));
            "pe_add"
        }
        Kind::MatmulNt => {
            matmul_values(&mut v, &im.scores, n, d, n, true);
            "matmul"
        }
        Kind::Matmul => {
            matmul_values(&mut v, &im.context, n, n, d, false);
            "matmul"
        }
        Kind::Softmax => {
            let sp = &im.softmax;
            v.set("rows", n)
                .set("cols", n)
                .set("exp_mult", sp.exp_multiplier)
                .set("exp_shift", sp.exp_shift)
                .set("levels", (1i64 << sp.output.bits) - 1)
                .set("y_zero", sp.output.zero_point)
                .set("lut", aggregate(&sp.lut));
            "softmax"
        }
        Kind::Residual => {
            let r = if def.name == "residual1" { &im.residual1 } else { &im.residual2 };
            v.set("count", n * d)
                .set("a_zero", r.lhs_zero)
                .set("a_mult", r.lhs.multiplier)
                .set("a_shift", r.lhs.shift)
                .set("b_zero", r.rhs_zero)
                .set("b_mult", r.rhs.multiplier)
                .set("b_shift", r.rhs.shift)
                .set("y_zero", r.output.zero_point);
            "residual"
        }
        Kind::BatchNorm => {
            let bn = if def.name == "norm1" { &im.norm1 } else { &im.norm2 };
            v.set("count", n * d)
                .set("d", d)
                .set("multipliers", aggregate(&bn.multiplier))
                .set("shifts", aggregate(&bn.shift))
                .set("offsets", aggregate(bn.offset.iter().map(|&o| hex64(o))))
                .set("x_zero", bn.input_zero)
                .set("y_zero", bn.output.zero_point);
            "batchnorm"
        }
        Kind::Gap => {
            v.set("rows", n).set("d", d).set("x_zero", im.norm2.output.zero_point);
            "gap"
        }
    };
    Ok(RtlFile {
        name: format!("{}.vhd", entity_name(def.name)),
        contents: RtlTemplate::builtin(template)?.render(&v)?,
    })
}

pub fn emit_package(im: &IntModel) -> Result<RtlFile> {
    let mut v = Values::default();
    v.set("bits", im.bits)
        .set("frac_bits", SOFTMAX_FRAC_BITS)
        .set("exp_bits", SOFTMAX_EXP_BITS);
    Ok(RtlFile {
        name: PACKAGE_FILE.to_string(),
        contents: RtlTemplate::builtin("package")?.render(&v)?,
    })
}

fn buffer_names() -> Vec<&'static str> {
    let mut names = vec!["input"];
    names.extend(LAYERS.iter().map(|l| l.writes));
    names
}

/// Top-level entity chaining every layer.
pub fn emit_top_file(im: &IntModel) -> Result<RtlFile> {
    let mut signals = String::new();
    let mut wiring = String::new();
    let mut buffers = String::new();
    let mut instances = String::new();

    for b in buffer_names() {
        let w = aw(im, b);
        let _ = writeln!(signals, "  signal {b}_we    : std_logic;");
        let _ = writeln!(signals, "  signal {b}_waddr : unsigned({w} - 1 downto 0);");
        let _ = writeln!(signals, "  signal {b}_wdata : signed(BITS - 1 downto 0);");
        let _ = writeln!(signals, "  signal {b}_raddr : unsigned({w} - 1 downto 0);");
        let _ = writeln!(signals, "  signal {b}_rdata : signed(BITS - 1 downto 0);");
    }
    for l in &LAYERS {
        let _ = writeln!(signals, "  signal s_{0}, d_{0} : std_logic;", l.name);
        for (port, buf) in l.reads {
            let _ = writeln!(
                signals,
                "  signal a_{}_{port} : unsigned({} - 1 downto 0);",
                l.name,
                aw(im, buf)
            );
        }
    }

    let _ = writeln!(wiring, "  s_{} <= start;", LAYERS[0].name);
    for pair in LAYERS.windows(2) {
        let _ = writeln!(wiring, "  s_{} <= d_{};", pair[1].name, pair[0].name);
    }
    let _ = writeln!(wiring, "  done <= d_{};", LAYERS[LAYERS.len() - 1].name);
    let _ = writeln!(wiring, "  input_we    <= in_we;");
    let _ = writeln!(wiring, "  input_waddr <= in_addr;");
    let _ = writeln!(wiring, "  input_wdata <= in_data;");
    let _ = writeln!(wiring, "  output_raddr <= out_addr;");
    let _ = writeln!(wiring, "  out_data <= output_rdata;");
    for b in buffer_names() {
        let readers: Vec<String> = LAYERS
            .iter()
            .flat_map(|l| {
                l.reads
                    .iter()
                    .filter(|(_, buf)| *buf == b)
                    .map(move |(port, _)| format!("a_{}_{port}", l.name))
            })
            .collect();
        if !readers.is_empty() {
            // Idle layers drive address zero, so OR-ing selects the active reader.
            let _ = writeln!(wiring, "  {b}_raddr <= {};", readers.join(" or "));
        }
    }

    for b in buffer_names() {
        let _ = writeln!(
            buffers,
            "  buf_{b} : entity work.qf_buffer\n    generic map (DEPTH => {}, AW => {}, BITS => BITS)\n    port map (clk => clk, we => {b}_we, waddr => {b}_waddr, wdata => {b}_wdata,\n              raddr => {b}_raddr, rdata => {b}_rdata);\n",
            buffer_depth(im, b),
            aw(im, b)
        );
    }

    for l in &LAYERS {
        let mut ports = vec![
            "clk => clk".to_string(),
            "rst => rst".to_string(),
            format!("start => s_{}", l.name),
            format!("done => d_{}", l.name),
        ];
        for (port, buf) in l.reads {
            ports.push(format!("{port}_addr => a_{}_{port}", l.name));
            ports.push(format!("{port}_data => {buf}_rdata"));
        }
        let o = l.writes;
        ports.push(format!("y_we => {o}_we"));
        ports.push(format!("y_addr => {o}_waddr"));
        ports.push(format!("y_data => {o}_wdata"));
        let _ = writeln!(
            instances,
            "  u_{} : entity work.{}\n    port map (\n      {}\n    );\n",
            l.name,
            entity_name(l.name),
            ports.join(",\n      ")
        );
    }

    let mut v = Values::default();
    v.set("entity", TOP_ENTITY)
        .set("bits", im.bits)
        .set("in_aw", aw(im, "input"))
        .set("out_aw", aw(im, "output"))
        .set("signals", signals.trim_end())
        .set("wiring", wiring.trim_end())
        .set("buffers", buffers.trim_end())
        .set("instances", instances.trim_end());
    Ok(RtlFile {
        name: format!("{TOP_ENTITY}.vhd"),
        contents: RtlTemplate::builtin("top")?.render(&v)?,
    })
}

/// Golden vectors: the all-zero (real) window first, then random codes.
pub fn golden_vectors(im: &IntModel, count: usize, seed: u64) -> Result<Vec<GoldenVector>> {
    if count < MIN_VECTORS {
        return Err(CodegenError::TooFewVectors {
            min: MIN_VECTORS,
            got: count,
        });
    }
    let (n, m) = (im.config.n, im.config.m);
    let (lo, hi) = (qmin(im.input.bits), qmax(im.input.bits));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let input: Vec<i32> = if i == 0 {
            vec![im.input.zero_point; n * m]
        } else {
            (0..n * m).map(|_| rng.random_range(lo..=hi)).collect()
        };
        let (y, _) = int_forward(im, &IntTensor::new(vec![n, m], input.clone(), im.input))?;
        out.push(GoldenVector {
            input,
            output: y.values,
        });
    }
    Ok(out)
}

pub fn emit_testbench(im: &IntModel, vectors: &[GoldenVector], p: &PlatformSpec) -> Result<RtlFile> {
    if vectors.len() < MIN_VECTORS {
        return Err(CodegenError::TooFewVectors {
            min: MIN_VECTORS,
            got: vectors.len(),
        });
    }
    let half_ps = 1_000_000_000_000u64 / p.clock_hz / 2;
    let mut v = Values::default();
    v.set("entity", TB_ENTITY)
        .set("top", TOP_ENTITY)
        .set("bits", im.bits)
        .set("n_vec", vectors.len())
        .set("in_len", im.config.n * im.config.m)
        .set("out_len", im.config.k)
        .set("in_aw", aw(im, "input"))
        .set("out_aw", aw(im, "output"))
        .set("half_period_ps", half_ps)
        .set("inputs", aggregate(vectors.iter().flat_map(|g| g.input.iter())))
        .set("expected", aggregate(vectors.iter().flat_map(|g| g.output.iter())));
    Ok(RtlFile {
        name: format!("{TB_ENTITY}.vhd"),
        contents: RtlTemplate::builtin("testbench")?.render(&v)?,
    })
}

pub fn emit_constraints(p: &PlatformSpec) -> Result<RtlFile> {
    let (tpl, ext) = match p.constraint_style {
        ConstraintStyle::Xdc => ("xdc", "xdc"),
        ConstraintStyle::Pdc => ("pdc", "pdc"),
    };
    let mut v = Values::default();
    v.set("platform", &p.name)
        .set("clock_mhz", format!("{}", p.clock_hz as f64 / 1e6))
        .set("period_ns", format!("{:.3}", p.clock_period_ns()));
    Ok(RtlFile {
        name: format!("{}.{ext}", p.name),
        contents: RtlTemplate::builtin(tpl)?.render(&v)?,
    })
}

/// Number of golden vectors [`emit_top`] embeds.
pub const DEFAULT_VECTORS: usize = 16;
const VECTOR_SEED: u64 = 0x5eed;

/// Full design: package, one file per layer, top level, testbench,
/// constraint stub and golden vectors.
pub fn emit_top(im: &IntModel, p: &PlatformSpec) -> Result<RtlDesign> {
    let vectors = golden_vectors(im, DEFAULT_VECTORS, VECTOR_SEED)?;
    let mut files = vec![emit_package(im)?];
    for name in layer_names() {
        files.push(emit_layer(im, name)?);
    }
    files.push(emit_top_file(im)?);
    files.push(emit_testbench(im, &vectors, p)?);
    Ok(RtlDesign {
        top: TOP_ENTITY.to_string(),
        testbench: TB_ENTITY.to_string(),
        files,
        constraints: vec![emit_constraints(p)?],
        vectors,
    })
}

fn io_err(path: &Path, e: std::io::Error) -> CodegenError {
    CodegenError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

impl RtlDesign {
    /// Golden vectors as text: one integer per line, vector by vector, each
    /// input window row-major.
    pub fn vector_files(&self) -> (String, String) {
        let mut inputs = String::new();
        let mut outputs = String::new();
        for g in &self.vectors {
            for x in &g.input {
                let _ = writeln!(inputs, "{x}");
            }
            for y in &g.output {
                let _ = writeln!(outputs, "{y}");
            }
        }
        (inputs, outputs)
    }

    /// Writes all sources, constraints and golden-vector files into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let (gi, go) = self.vector_files();
        let extra = [
            RtlFile {
                name: "golden_inputs.txt".into(),
                contents: gi,
            },
            RtlFile {
                name: "golden_outputs.txt".into(),
                contents: go,
            },
        ];
        let mut written = Vec::new();
        for f in self.files.iter().chain(&self.constraints).chain(&extra) {
            let path = dir.join(&f.name);
            std::fs::write(&path, &f.contents).map_err(|e| io_err(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimStatus {
    Passed { vectors: usize, cycles: u64 },
    /// Simulator not run, e.g. `skipped(tool-missing)`.
    Skipped(String),
}

impl std::fmt::Display for SimStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimStatus::Passed { vectors, cycles } => write!(f, "pass ({vectors} vectors, {cycles} cycles)"),
            SimStatus::Skipped(why) => write!(f, "skipped({why})"),
        }
    }
}

/// Locates GHDL: `QFORGE_GHDL` if set, else `ghdl` on `PATH`.
pub fn find_ghdl() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("QFORGE_GHDL") {
        let p = PathBuf::from(p);
        return p.is_file().then_some(p);
    }
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|d| d.join("ghdl"))
        .find(|p| p.is_file())
}

fn run_ghdl(ghdl: &Path, dir: &Path, args: &[&str], log: &mut String) -> Result<bool> {
    let out = Command::new(ghdl)
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| io_err(ghdl, e))?;
    log.push_str(&String::from_utf8_lossy(&out.stdout));
    log.push_str(&String::from_utf8_lossy(&out.stderr));
    Ok(out.status.success())
}

/// Analyzes, elaborates and runs the testbench with GHDL in `workdir`.
pub fn run_external_sim(design: &RtlDesign, workdir: &Path) -> Result<SimStatus> {
    let Some(ghdl) = find_ghdl() else {
        return Ok(SimStatus::Skipped("tool-missing".into()));
    };
    design.write_to(workdir)?;
    let mut log = String::new();
    let fail = |summary: &str, log: String| CodegenError::Simulation {
        summary: summary.to_string(),
        log,
    };
    for f in &design.files {
        if !run_ghdl(&ghdl, workdir, &["-a", "--std=08", &f.name], &mut log)? {
            return Err(fail(&format!("analysis of {} failed", f.name), log));
        }
    }
    if !run_ghdl(&ghdl, workdir, &["-e", "--std=08", &design.testbench], &mut log)? {
        return Err(fail("elaboration failed", log));
    }
    let ok = run_ghdl(&ghdl, workdir, &["-r", "--std=08", &design.testbench], &mut log)?;
    let Some(line) = log.lines().find(|l| l.contains("QFORGE_RESULT")) else {
        return Err(fail("no result line", log));
    };
    let field = |key: &str| -> Option<u64> {
        let rest = &line[line.find(&format!("{key}="))? + key.len() + 1..];
        rest.split_whitespace().next()?.parse().ok()
    };
    let (Some(vectors), Some(failures), Some(cycles)) = (field("vectors"), field("failures"), field("cycles")) else {
        return Err(fail("unparseable result line", log));
    };
    if !ok || failures > 0 || cycles == 0 {
        return Err(fail(&format!("{failures} mismatching outputs"), log));
    }
    Ok(SimStatus::Passed {
        vectors: vectors as usize,
        cycles,
    })
}
