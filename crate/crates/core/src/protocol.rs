//! Continual scenarios: per-step class or domain sets, class orderings, and
//! the label collapse that turns a full dataset into a step dataset.

use std::fmt;
use std::str::FromStr;

use crate::data::{Dataset, LabelMap};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Future-class pixels may appear, labeled background.
    Overlapped,
    /// Images containing any future class are dropped.
    Disjoint,
    /// All classes from the first step; each step adds appearance regimes.
    DomainIncremental,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlapped" => Ok(Mode::Overlapped),
            "disjoint" => Ok(Mode::Disjoint),
            "domain" => Ok(Mode::DomainIncremental),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected overlapped, disjoint or domain)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Overlapped => "overlapped",
            Mode::Disjoint => "disjoint",
            Mode::DomainIncremental => "domain",
        })
    }
}

/// A parsed `B-I` or `dom-B-I` scenario string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub domain: bool,
    pub base: usize,
    pub increment: usize,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (domain, rest) = match s.strip_prefix("dom-") {
            Some(r) => (true, r),
            None => (false, s),
        };
        let bad = || Error::Config(format!("scenario {s:?} is not of the form B-I or dom-B-I"));
        let (b, i) = rest.split_once('-').ok_or_else(bad)?;
        let base: usize = b.parse().map_err(|_| bad())?;
        let increment: usize = i.parse().map_err(|_| bad())?;
        if base == 0 || increment == 0 {
            return Err(Error::Config(format!("scenario {s:?} needs positive base and increment")));
        }
        Ok(Scenario {
            domain,
            base,
            increment,
        })
    }
}

impl Scenario {
    /// Units per step; `total` counts classes (or domains in domain mode).
    pub fn step_sizes(&self, total: usize) -> Result<Vec<usize>> {
        let (b, i) = (self.base, self.increment);
        if total <= b || (total - b) % i != 0 {
            let what = if self.domain { "domains" } else { "classes" };
            return Err(Error::Config(format!(
                "scenario {b}-{i} does not fit {total} {what}: {total} - {b} = {} is not a positive multiple of {i}",
                total as i64 - b as i64
            )));
        }
        let k = (total - b) / i;
        let mut sizes = vec![b];
        sizes.extend(std::iter::repeat_n(i, k));
        Ok(sizes)
    }
}

/// Units learned per step for a `B-I` scenario string.
pub fn parse_scenario(spec: &str, total: usize) -> Result<Vec<usize>> {
    spec.parse::<Scenario>()?.step_sizes(total)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSchedule {
    pub mode: Mode,
    pub n_classes: usize,
    /// Units introduced per step.
    pub sizes: Vec<usize>,
    /// Class ids in learning order (class modes).
    pub ordering: Vec<usize>,
    /// Non-background classes per step; domain mode puts every class in step 1.
    pub class_sets: Vec<Vec<usize>>,
    /// Domain indices per step; class modes list every domain at every step.
    pub domain_sets: Vec<Vec<usize>>,
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n + 1];
    for &c in perm {
        if c == 0 || c > n {
            return Err(Error::Config(format!("class ordering has id {c} outside 1..={n}")));
        }
        if seen[c] {
            return Err(Error::Config(format!("class ordering repeats id {c}")));
        }
        seen[c] = true;
    }
    if let Some(missing) = (1..=n).find(|&c| !seen[c]) {
        return Err(Error::Config(format!("class ordering is missing id {missing}")));
    }
    Ok(())
}

impl TaskSchedule {
    /// Schedule for `scenario` with the identity class ordering. `n_domains`
    /// only matters in domain mode.
    pub fn new(scenario: &Scenario, mode: Mode, n_classes: usize, n_domains: usize) -> Result<Self> {
        if scenario.domain != (mode == Mode::DomainIncremental) {
            return Err(Error::Config(format!(
                "mode {mode} does not match a {} scenario",
                if scenario.domain { "dom-B-I" } else { "B-I" }
            )));
        }
        let total = if scenario.domain { n_domains } else { n_classes };
        let sizes = scenario.step_sizes(total)?;
        let mut schedule = TaskSchedule {
            mode,
            n_classes,
            sizes,
            ordering: (1..=n_classes).collect(),
            class_sets: Vec::new(),
            domain_sets: Vec::new(),
        };
        schedule.redraw(n_domains);
        Ok(schedule)
    }

    fn redraw(&mut self, n_domains: usize) {
        let chunks = |items: Vec<usize>, sizes: &[usize]| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut it = items.into_iter();
            for &s in sizes {
                out.push(it.by_ref().take(s).collect());
            }
            out
        };
        let t = self.sizes.len();
        if self.mode == Mode::DomainIncremental {
            self.class_sets = std::iter::once(self.ordering.clone())
                .chain(std::iter::repeat_n(Vec::new(), t - 1))
                .collect();
            self.domain_sets = chunks((0..n_domains).collect(), &self.sizes);
        } else {
            self.class_sets = chunks(self.ordering.clone(), &self.sizes);
            self.domain_sets = vec![(0..n_domains).collect(); t];
        }
    }

    /// Same step sizes with classes drawn from `perm` in order.
    pub fn apply_ordering(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_classes)?;
        let mut s = self.clone();
        s.ordering = perm.to_vec();
        let n_domains = self.domain_sets.iter().flatten().max().map_or(1, |&d| d + 1);
        s.redraw(n_domains);
        Ok(s)
    }

    pub fn n_steps(&self) -> usize {
        self.sizes.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.n_steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.n_steps())));
        }
        Ok(())
    }

    /// Classes introduced at step `t` (1-based).
    pub fn current_classes(&self, t: usize) -> &[usize] {
        &self.class_sets[t - 1]
    }

    /// Classes seen up to and including step `t`, background first.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        std::iter::once(0)
            .chain(self.class_sets[..t].iter().flatten().copied())
            .collect()
    }

    pub fn future_classes(&self, t: usize) -> Vec<usize> {
        self.class_sets[t..].iter().flatten().copied().collect()
    }

    pub fn seen_domains(&self, t: usize) -> Vec<usize> {
        let mut d: Vec<usize> = self.domain_sets[..t].iter().flatten().copied().collect();
        d.sort_unstable();
        d.dedup();
        d
    }
}

/// Images of one step with labels restricted to its classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepDataset {
    /// Positions in the full dataset, ascending.
    pub indices: Vec<usize>,
    /// Labels in dataset id space; only the step's classes and background.
    pub labels: Vec<LabelMap>,
}

impl StepDataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn build_step_dataset(ds: &Dataset, schedule: &TaskSchedule, t: usize) -> Result<StepDataset> {
    schedule.check_step(t)?;
    if schedule.n_classes != ds.n_classes {
        return Err(Error::Config(format!(
            "schedule covers {} classes, dataset has {}",
            schedule.n_classes, ds.n_classes
        )));
    }
    let mut out = StepDataset {
        indices: Vec::new(),
        labels: Vec::new(),
    };
    if schedule.mode == Mode::DomainIncremental {
        let domains = &schedule.domain_sets[t - 1];
        for (i, s) in ds.samples.iter().enumerate() {
            if domains.contains(&s.domain) {
                out.indices.push(i);
                out.labels.push(s.mask.clone());
            }
        }
    } else {
        let mut is_current = [false; 256];
        let mut is_future = [false; 256];
        for &c in schedule.current_classes(t) {
            is_current[c] = true;
        }
        for c in schedule.future_classes(t) {
            is_future[c] = true;
        }
        for (i, s) in ds.samples.iter().enumerate() {
            let ids = s.mask.ids();
            if !ids.iter().any(|&c| is_current[c as usize]) {
                continue;
            }
            if schedule.mode == Mode::Disjoint && ids.iter().any(|&c| is_future[c as usize]) {
                continue;
            }
            out.indices.push(i);
            out.labels.push(s.mask.map(|c| if is_current[c as usize] { c } else { 0 }));
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("step {t} selects no training images")));
    }
    Ok(out)
}
