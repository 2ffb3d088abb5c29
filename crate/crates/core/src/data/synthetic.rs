//! Seeded multimodal toy data: each class plants a sequence motif, folds a
//! characteristic structure template and shifts the expression mean.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{parse_dot_bracket, RnaRecord};
use crate::error::{Error, Result};
use crate::numerics::params::split_rng;

const BASES: [char; 4] = ['A', 'C', 'G', 'U'];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub seq_len: usize,
    /// Zero produces records without expression vectors.
    pub expression_dim: usize,
    pub seed: u64,
    /// Length of the generated per-class motifs (ignored when `motifs` is given).
    pub motif_len: usize,
    /// Scale of the per-class expression mean vectors.
    pub expression_shift: f64,
    /// Per sample and per modality, probability of drawing that modality's signal
    /// from a different, randomly chosen class.
    pub corrupt_prob: f64,
    /// Explicit per-class motifs; generated from the seed when absent.
    pub motifs: Option<Vec<String>>,
    /// Explicit per-class structure templates; built-in family when absent.
    pub templates: Option<Vec<String>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 100,
            seq_len: 64,
            expression_dim: 32,
            seed: 0,
            motif_len: 6,
            expression_shift: 1.0,
            corrupt_prob: 0.05,
            motifs: None,
            templates: None,
        }
    }
}

/// Per-class signals derived from a [`SyntheticSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTable {
    pub motifs: Vec<String>,
    pub templates: Vec<String>,
    pub expression_means: Vec<Vec<f64>>,
}

fn hairpin(stem: usize, loop_len: usize) -> String {
    format!("{}{}{}", "(".repeat(stem), ".".repeat(loop_len), ")".repeat(stem))
}

/// Built-in template for class `c`: hairpin, two hairpins, multiloop, interior loop,
/// with 8, 16, 24 and 32 paired bases; stems lengthen every four classes.
pub fn default_template(c: usize) -> String {
    let s = 4 + c / 4;
    match c % 4 {
        0 => hairpin(s, 4),
        1 => format!("{}.{}", hairpin(s, 4), hairpin(s, 4)),
        2 => format!(
            "{}..{}..{}..{}",
            "(".repeat(s),
            hairpin(s, 4),
            hairpin(s, 4),
            ")".repeat(s)
        ),
        _ => format!("{}...{}...{}", "(".repeat(2 * s), hairpin(2 * s, 4), ")".repeat(2 * s)),
    }
}

impl SyntheticSpec {
    /// Parses and validates a TOML document; absent keys take defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Spec(e.message().trim().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return fail("num_classes and samples_per_class must be positive".into());
        }
        if !(0.0..1.0).contains(&self.corrupt_prob) {
            return fail(format!("corrupt_prob {} outside [0, 1)", self.corrupt_prob));
        }
        if !self.expression_shift.is_finite() {
            return fail("expression_shift must be finite".into());
        }
        if self.motifs.is_none() && self.motif_len == 0 {
            return fail("motif_len must be positive".into());
        }
        if self.motifs.is_none() && 4f64.powi(self.motif_len.min(16) as i32) < self.num_classes as f64 {
            return fail(format!("motif_len {} cannot give {} distinct motifs", self.motif_len, self.num_classes));
        }
        for (what, list) in [("motifs", &self.motifs), ("templates", &self.templates)] {
            if let Some(list) = list {
                if list.len() != self.num_classes {
                    return fail(format!("{} {what} for {} classes", list.len(), self.num_classes));
                }
                for (i, a) in list.iter().enumerate() {
                    if list[..i].contains(a) {
                        return fail(format!("{what} for classes are not pairwise distinct: {a}"));
                    }
                }
            }
        }
        if let Some(motifs) = &self.motifs {
            if let Some(bad) = motifs.iter().find(|m| m.is_empty() || !m.chars().all(|c| BASES.contains(&c))) {
                return fail(format!("motif {bad:?} must be non-empty over ACGU"));
            }
        }
        let templates: Vec<String> = match &self.templates {
            Some(t) => t.clone(),
            None => (0..self.num_classes).map(default_template).collect(),
        };
        for t in &templates {
            parse_dot_bracket(t).map_err(|e| Error::Spec(format!("template {t:?}: {e}")))?;
        }
        let longest_motif = match &self.motifs {
            Some(m) => m.iter().map(String::len).max().unwrap_or(0),
            None => self.motif_len,
        };
        let longest_template = templates.iter().map(String::len).max().unwrap_or(0);
        if self.seq_len < longest_motif + longest_template {
            return fail(format!(
                "seq_len {} is shorter than longest motif ({longest_motif}) plus longest template ({longest_template})",
                self.seq_len
            ));
        }
        Ok(())
    }

    pub fn class_table(&self) -> Result<ClassTable> {
        self.validate()?;
        let motifs = match &self.motifs {
            Some(m) => m.clone(),
            None => {
                let mut rng = split_rng(self.seed, "synthetic.motifs");
                let mut out: Vec<String> = Vec::new();
                while out.len() < self.num_classes {
                    let m: String = (0..self.motif_len)
                        .map(|_| *BASES.choose(&mut rng).expect("non-empty"))
                        .collect();
                    if !out.contains(&m) {
                        out.push(m);
                    }
                }
                out
            }
        };
        let templates = match &self.templates {
            Some(t) => t.clone(),
            None => (0..self.num_classes).map(default_template).collect(),
        };
        let mut rng = split_rng(self.seed, "synthetic.expression_means");
        let expression_means = (0..self.num_classes)
            .map(|_| {
                (0..self.expression_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        self.expression_shift * z
                    })
                    .collect()
            })
            .collect();
        Ok(ClassTable {
            motifs,
            templates,
            expression_means,
        })
    }
}

/// Generates `num_classes × samples_per_class` records, class-major, ids `syn00000...`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<RnaRecord>> {
    let table = spec.class_table()?;
    let mut rng = split_rng(spec.seed, "synthetic.samples");
    let c_total = spec.num_classes;
    let source = |rng: &mut rand_chacha::ChaCha8Rng, c: usize| -> usize {
        if c_total > 1 && rng.random::<f64>() < spec.corrupt_prob {
            let other = rng.random_range(0..c_total - 1);
            if other >= c { other + 1 } else { other }
        } else {
            c
        }
    };
    let mut records = Vec::with_capacity(c_total * spec.samples_per_class);
    for c in 0..c_total {
        for k in 0..spec.samples_per_class {
            let (seq_c, str_c, exp_c) = (source(&mut rng, c), source(&mut rng, c), source(&mut rng, c));

            let mut seq: Vec<char> = (0..spec.seq_len)
                .map(|_| BASES[rng.random_range(0..4)])
                .collect();
            let motif: Vec<char> = table.motifs[seq_c].chars().collect();
            let at = rng.random_range(0..=spec.seq_len - motif.len());
            seq[at..at + motif.len()].copy_from_slice(&motif);

            let mut structure = vec!['.'; spec.seq_len];
            let template: Vec<char> = table.templates[str_c].chars().collect();
            let at = rng.random_range(0..=spec.seq_len - template.len());
            structure[at..at + template.len()].copy_from_slice(&template);

            let expression = (spec.expression_dim > 0).then(|| {
                table.expression_means[exp_c]
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + z
                    })
                    .collect()
            });

            records.push(RnaRecord {
                id: format!("syn{:05}", c * spec.samples_per_class + k),
                sequence: seq.into_iter().collect(),
                structure: structure.into_iter().collect(),
                expression,
                label: c,
            });
        }
    }
    Ok(records)
}
