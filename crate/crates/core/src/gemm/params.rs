use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::kernel::{MR, NR};

const F32: usize = std::mem::size_of::<f32>();

/// Blocking strides of the five-loop GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmCacheParams {
    pub mc: usize,
    pub nc: usize,
    pub kc: usize,
    pub mr: usize,
    pub nr: usize,
}

impl GemmCacheParams {
    /// The values BLIS ships for squarish FP32 problems on the Carmel core.
    pub const BLIS_DEFAULT: GemmCacheParams = GemmCacheParams {
        mc: 560,
        nc: 3072,
        kc: 368,
        mr: MR,
        nr: NR,
    };

    pub fn new(mc: usize, nc: usize, kc: usize, mr: usize, nr: usize) -> Result<Self> {
        let p = GemmCacheParams { mc, nc, kc, mr, nr };
        p.validate()?;
        Ok(p)
    }

    /// Structural checks: positive strides, supported register block, and
    /// `mc`/`nc` multiples of `mr`/`nr`.
    pub fn validate(&self) -> Result<()> {
        if self.mc == 0 || self.nc == 0 || self.kc == 0 {
            return Err(Error::Config(format!(
                "cache strides must be positive: {self}"
            )));
        }
        if self.mr != MR || self.nr != NR {
            return Err(Error::Config(format!(
                "register block {}×{} unsupported, the micro-kernel is {MR}×{NR}",
                self.mr, self.nr
            )));
        }
        if !self.mc.is_multiple_of(self.mr) || !self.nc.is_multiple_of(self.nr) {
            return Err(Error::Config(format!(
                "mc and nc must be multiples of mr and nr: {self}"
            )));
        }
        Ok(())
    }

    /// Checks that the packed panels fit the given cache hierarchy: the
    /// `Ar`/`Br` micro-panels in L1 and the L2-resident packed block in L2.
    pub fn check_fit(&self, hw: &CacheHierarchy, variant: LoopVariant) -> Result<()> {
        self.validate()?;
        let panels = self.kc * (self.mr + self.nr) * F32;
        if panels > hw.l1.bytes {
            return Err(Error::Config(format!(
                "kc={} micro-panels need {panels} bytes, L1 holds {}",
                self.kc, hw.l1.bytes
            )));
        }
        let l2_block = match variant {
            LoopVariant::A2B1 => self.mc * self.kc * F32,
            LoopVariant::B2A1 => self.kc * self.nc * F32,
        };
        if l2_block > hw.l2.bytes {
            return Err(Error::Config(format!(
                "{variant} packed block needs {l2_block} bytes, L2 holds {}",
                hw.l2.bytes
            )));
        }
        Ok(())
    }

    /// Bytes of the two packing buffers for an `m×n×k` problem.
    pub fn packing_bytes(&self, m: usize, n: usize, k: usize) -> (usize, usize) {
        let kc = self.kc.min(k);
        let ac = round_up(self.mc.min(m), self.mr) * kc * F32;
        let bc = round_up(self.nc.min(n), self.nr) * kc * F32;
        (ac, bc)
    }
}

impl Default for GemmCacheParams {
    fn default() -> Self {
        Self::BLIS_DEFAULT
    }
}

impl fmt::Display for GemmCacheParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.mc, self.nc, self.kc, self.mr, self.nr
        )
    }
}

impl FromStr for GemmCacheParams {
    type Err = Error;

    /// Parses `mc,nc,kc,mr,nr`.
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad cache params `{s}`: {e}")))?;
        match v[..] {
            [mc, nc, kc, mr, nr] => GemmCacheParams::new(mc, nc, kc, mr, nr),
            _ => Err(Error::Config(format!(
                "cache params need five values mc,nc,kc,mr,nr, got `{s}`"
            ))),
        }
    }
}

/// Loop order of the blocked GEMM.
///
/// `A2B1` is the classic order with the packed `Ac` block resident in L2 and
/// `Br` micro-panels streamed through L1. `B2A1` interchanges the `jc`/`ic`
/// loops and the two macro-kernel loops, keeping `Bc` in L2 and an `Ar`
/// micro-panel in L1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum LoopVariant {
    #[default]
    A2B1,
    B2A1,
}

impl fmt::Display for LoopVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoopVariant::A2B1 => "a2b1",
            LoopVariant::B2A1 => "b2a1",
        })
    }
}

impl FromStr for LoopVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a2b1" => Ok(LoopVariant::A2B1),
            "b2a1" => Ok(LoopVariant::B2A1),
            _ => Err(Error::Config(format!("unknown loop variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLevel {
    pub bytes: usize,
    pub line: usize,
    pub ways: usize,
}

impl CacheLevel {
    pub const fn new(bytes: usize, line: usize, ways: usize) -> Self {
        CacheLevel { bytes, line, ways }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHierarchy {
    pub l1: CacheLevel,
    pub l2: CacheLevel,
    pub l3: Option<CacheLevel>,
}

impl CacheHierarchy {
    pub fn new(l1: CacheLevel, l2: CacheLevel, l3: Option<CacheLevel>) -> Result<Self> {
        let ok = l1.bytes > 0 && l2.bytes > l1.bytes && l3.is_none_or(|l3| l3.bytes > l2.bytes);
        if !ok {
            return Err(Error::Config(format!(
                "cache sizes must be positive and strictly increasing: L1={} L2={} L3={:?}",
                l1.bytes,
                l2.bytes,
                l3.map(|l| l.bytes)
            )));
        }
        Ok(CacheHierarchy { l1, l2, l3 })
    }

    /// NVIDIA Carmel: 64 KiB 4-way L1D, 2 MiB 16-way L2, no L3.
    pub const fn carmel() -> Self {
        CacheHierarchy {
            l1: CacheLevel::new(64 << 10, 64, 4),
            l2: CacheLevel::new(2 << 20, 64, 16),
            l3: None,
        }
    }

    /// Conservative values when the host cannot be queried.
    pub const fn generic() -> Self {
        CacheHierarchy {
            l1: CacheLevel::new(32 << 10, 64, 8),
            l2: CacheLevel::new(1 << 20, 64, 16),
            l3: Some(CacheLevel::new(8 << 20, 64, 16)),
        }
    }

    /// Reads the data/unified caches of cpu0 from sysfs, falling back to
    /// [`CacheHierarchy::generic`].
    pub fn detect() -> Self {
        Self::from_sysfs(Path::new("/sys/devices/system/cpu/cpu0/cache"))
            .unwrap_or_else(Self::generic)
    }

    fn from_sysfs(dir: &Path) -> Option<Self> {
        let mut levels: [Option<CacheLevel>; 3] = [None; 3];
        for entry in std::fs::read_dir(dir).ok()? {
            let path = entry.ok()?.path();
            let read = |f: &str| std::fs::read_to_string(path.join(f)).ok();
            let Some(kind) = read("type") else { continue };
            if kind.trim() == "Instruction" {
                continue;
            }
            let level: usize = read("level")?.trim().parse().ok()?;
            let bytes = parse_size(read("size")?.trim())?;
            let line = read("coherency_line_size")
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(64);
            let ways = read("ways_of_associativity")
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(8);
            if (1..=3).contains(&level) {
                levels[level - 1] = Some(CacheLevel::new(bytes, line, ways));
            }
        }
        let l3 = levels[2].filter(|l3| levels[1].is_some_and(|l2| l3.bytes > l2.bytes));
        CacheHierarchy::new(levels[0]?, levels[1]?, l3).ok()
    }
}

fn parse_size(s: &str) -> Option<usize> {
    let (num, mult) = match s.as_bytes().last()? {
        b'K' => (&s[..s.len() - 1], 1 << 10),
        b'M' => (&s[..s.len() - 1], 1 << 20),
        b'G' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<usize>().ok().map(|v| v * mult)
}

pub(crate) fn round_up(x: usize, to: usize) -> usize {
    x.div_ceil(to) * to
}

fn round_down(x: usize, to: usize) -> usize {
    x / to * to
}

/// Share of L1 given to the `Ar` + `Br` micro-panels.
const L1_PANEL_SHARE: (usize, usize) = (3, 8);
/// Share of L2 given to the L2-resident packed block.
const L2_BLOCK_SHARE: (usize, usize) = (2, 5);
/// Outer stride used when the outer block has no cache level to target.
const OUTER_STRIDE_NO_L3: usize = 3072;
/// Cap on the outer stride when an L3 is present.
const OUTER_STRIDE_MAX: usize = 4096;
/// Largest `m` for which the swapped loop order is considered.
pub const B2A1_MAX_M: usize = 256;
/// `n / m` ratio above which the swapped loop order is chosen.
pub const B2A1_ASPECT: usize = 64;

/// Heuristic, shape-dependent choice of blocking strides and loop order.
///
/// `kc` sizes the two micro-panels to a fixed share of L1. The block that
/// the variant keeps in L2 (`Ac` for A2B1, `Bc` for B2A1) is sized to a fixed
/// share of L2, and the outer block targets L3 when there is one. `mc` and
/// `kc` never exceed the padded problem extent.
pub fn select_cache_params(
    m: usize,
    n: usize,
    k: usize,
    hw: &CacheHierarchy,
) -> (GemmCacheParams, LoopVariant) {
    let (m, n, k) = (m.max(1), n.max(1), k.max(1));
    let kc_l1 = round_down(
        hw.l1.bytes * L1_PANEL_SHARE.0 / L1_PANEL_SHARE.1 / ((MR + NR) * F32),
        16,
    )
    .max(16);
    let kc = k.min(kc_l1);
    let l2_budget = hw.l2.bytes * L2_BLOCK_SHARE.0 / L2_BLOCK_SHARE.1;
    let outer = |reg: usize| match hw.l3 {
        Some(l3) => round_down(l3.bytes / 2 / (kc * F32), reg).clamp(reg, OUTER_STRIDE_MAX),
        None => OUTER_STRIDE_NO_L3,
    };
    let m_pad = round_up(m, MR);
    let n_pad = round_up(n, NR);

    let variant = if m <= B2A1_MAX_M && n >= B2A1_ASPECT * m {
        LoopVariant::B2A1
    } else {
        LoopVariant::A2B1
    };
    let (mc, nc) = match variant {
        LoopVariant::A2B1 => {
            let mc = round_down(l2_budget / (kc * F32), MR).max(MR);
            // the driver sizes Bc by min(nc, n), so nc is left unclamped
            (mc.min(m_pad), outer(NR))
        }
        LoopVariant::B2A1 => {
            let nc = round_down(l2_budget / (kc * F32), NR).max(NR);
            (outer(MR).min(m_pad), nc.min(n_pad))
        }
    };
    let params = GemmCacheParams {
        mc,
        nc,
        kc,
        mr: MR,
        nr: NR,
    };
    (params, variant)
}

/// Like [`select_cache_params`], but a matching record in `table` wins.
pub fn select_cache_params_with(
    m: usize,
    n: usize,
    k: usize,
    hw: &CacheHierarchy,
    table: Option<&ParamTable>,
) -> (GemmCacheParams, LoopVariant) {
    if let Some(rec) = table.and_then(|t| t.lookup(m, n, k)) {
        return (rec.params, rec.variant);
    }
    select_cache_params(m, n, k, hw)
}

/// One tuned entry of a [`ParamTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub params: GemmCacheParams,
    pub variant: LoopVariant,
}

/// Per-shape parameter overrides, keyed by power-of-two shape bucket.
///
/// Text form, one whitespace-delimited record per line, `#` starts a comment:
///
/// ```text
/// # m n k mc nc kc mr nr variant
/// 64 131072 64 64 3272 64 8 8 b2a1
/// ```
///
/// `m n k` are bucket keys: each dimension rounded up to a power of two.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTable {
    records: Vec<ParamRecord>,
}

pub const PARAM_TABLE_HEADER: &str = "# m n k mc nc kc mr nr variant";

/// The bucket key a shape is stored under.
pub fn shape_bucket(m: usize, n: usize, k: usize) -> (usize, usize, usize) {
    (
        m.max(1).next_power_of_two(),
        n.max(1).next_power_of_two(),
        k.max(1).next_power_of_two(),
    )
}

impl ParamTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[ParamRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Inserts or replaces the record for the bucket of `(m, n, k)`.
    pub fn insert(
        &mut self,
        m: usize,
        n: usize,
        k: usize,
        params: GemmCacheParams,
        variant: LoopVariant,
    ) {
        let (m, n, k) = shape_bucket(m, n, k);
        let rec = ParamRecord {
            m,
            n,
            k,
            params,
            variant,
        };
        match self
            .records
            .iter_mut()
            .find(|r| (r.m, r.n, r.k) == (m, n, k))
        {
            Some(r) => *r = rec,
            None => self.records.push(rec),
        }
    }

    pub fn lookup(&self, m: usize, n: usize, k: usize) -> Option<&ParamRecord> {
        let key = shape_bucket(m, n, k);
        self.records.iter().find(|r| (r.m, r.n, r.k) == key)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(PARAM_TABLE_HEADER);
        s.push('\n');
        for r in &self.records {
            let p = &r.params;
            s.push_str(&format!(
                "{} {} {} {} {} {} {} {} {}\n",
                r.m, r.n, r.k, p.mc, p.nc, p.kc, p.mr, p.nr, r.variant
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = ParamTable::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 9 {
                return Err(err(format!("expected 9 fields, found {}", f.len())));
            }
            let mut nums = [0usize; 8];
            for (slot, tok) in nums.iter_mut().zip(&f[..8]) {
                *slot = tok
                    .parse()
                    .map_err(|_| err(format!("`{tok}` is not a non-negative integer")))?;
            }
            let [m, n, k, mc, nc, kc, mr, nr] = nums;
            let params =
                GemmCacheParams::new(mc, nc, kc, mr, nr).map_err(|e| err(e.to_string()))?;
            let variant: LoopVariant = f[8].parse().map_err(|e: Error| err(e.to_string()))?;
            table.insert(m, n, k, params, variant);
        }
        Ok(table)
    }
}
