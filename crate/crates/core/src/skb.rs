//! Semantic knowledge bases built from class-level attribute vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1-based class identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub fn from_index(index: usize) -> Self {
        ClassId(u16::try_from(index + 1).expect("class index exceeds u16"))
    }

    /// 0-based position of the class.
    pub fn index(self) -> usize {
        usize::from(self.0) - 1
    }

    pub(crate) fn check(self, num_classes: usize) -> Result<Self> {
        if self.0 == 0 || usize::from(self.0) > num_classes {
            return Err(Error::ClassOutOfRange {
                class: u32::from(self.0),
                num_classes,
            });
        }
        Ok(self)
    }

    pub fn all(num_classes: usize) -> impl Iterator<Item = ClassId> {
        (0..num_classes).map(ClassId::from_index)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Attribute intensities for one class, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AttributeVector(Vec<f64>);

impl AttributeVector {
    /// Clips every value into `[0, 1]`. NaN is rejected.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        for (i, v) in values.iter_mut().enumerate() {
            if v.is_nan() {
                return Err(Error::NotANumber(i));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(AttributeVector(values))
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        AttributeVector(vec![value.clamp(0.0, 1.0); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn squared_distance(&self, other: &AttributeVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Values as transmitted on the wire.
    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }
}

impl TryFrom<Vec<f64>> for AttributeVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<AttributeVector> for Vec<f64> {
    fn from(v: AttributeVector) -> Self {
        v.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkbRole {
    Initial,
    Updated,
    Global,
    Enhanced,
}

impl SkbRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SkbRole::Initial => "initial",
            SkbRole::Updated => "updated",
            SkbRole::Global => "global",
            SkbRole::Enhanced => "enhanced",
        }
    }
}

/// A knowledge base: one attribute vector per class.
///
/// Every role except [`SkbRole::Global`] must cover all classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Skb {
    role: SkbRole,
    num_classes: usize,
    dim: usize,
    entries: BTreeMap<ClassId, AttributeVector>,
}

impl Skb {
    pub fn new(
        role: SkbRole,
        num_classes: usize,
        dim: usize,
        entries: BTreeMap<ClassId, AttributeVector>,
    ) -> Result<Self> {
        for (class, vector) in &entries {
            class.check(num_classes)?;
            if vector.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: vector.dim(),
                });
            }
        }
        if role != SkbRole::Global && entries.len() != num_classes {
            return Err(Error::IncompleteSkb {
                role: role.as_str(),
                expected: num_classes,
                found: entries.len(),
            });
        }
        Ok(Skb {
            role,
            num_classes,
            dim,
            entries,
        })
    }

    /// Complete SKB from vectors listed in class order.
    pub fn from_vectors(role: SkbRole, vectors: Vec<AttributeVector>) -> Result<Self> {
        let dim = vectors.first().ok_or(Error::EmptyKnowledgeBase)?.dim();
        let num_classes = vectors.len();
        let entries = vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| (ClassId::from_index(i), v))
            .collect();
        Self::new(role, num_classes, dim, entries)
    }

    pub fn uniform(role: SkbRole, num_classes: usize, dim: usize, value: f64) -> Self {
        let entries = ClassId::all(num_classes)
            .map(|c| (c, AttributeVector::constant(dim, value)))
            .collect();
        Skb {
            role,
            num_classes,
            dim,
            entries,
        }
    }

    pub fn role(&self) -> SkbRole {
        self.role
    }

    pub fn with_role(mut self, role: SkbRole) -> Result<Self> {
        if role != SkbRole::Global && !self.is_complete() {
            return Err(Error::IncompleteSkb {
                role: role.as_str(),
                expected: self.num_classes,
                found: self.entries.len(),
            });
        }
        self.role = role;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == self.num_classes
    }

    pub fn get(&self, class: ClassId) -> Option<&AttributeVector> {
        self.entries.get(&class)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &AttributeVector)> {
        self.entries.iter().map(|(c, v)| (*c, v))
    }

    pub fn missing_classes(&self) -> Vec<ClassId> {
        ClassId::all(self.num_classes)
            .filter(|c| !self.entries.contains_key(c))
            .collect()
    }

    /// Writes `M` rows of `d` values, row `m` holding class `m`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        if !self.is_complete() {
            return Err(Error::IncompleteSkb {
                role: self.role.as_str(),
                expected: self.num_classes,
                found: self.entries.len(),
            });
        }
        let mut csv = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(writer);
        for vector in self.entries.values() {
            csv.write_record(vector.values().iter().map(|v| v.to_string()))?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, role: SkbRole) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut vectors = Vec::new();
        for (row, record) in csv.records().enumerate() {
            let record = record?;
            let values = record
                .iter()
                .map(|field| {
                    field.parse::<f64>().map_err(|e| {
                        Error::Config(format!(
                            "row {}: bad attribute value {field:?}: {e}",
                            row + 1
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            vectors.push(AttributeVector::new(values)?);
        }
        Self::from_vectors(role, vectors)
    }

    /// Framed binary form: per entry a little-endian `u16` class id followed
    /// by `d` little-endian `f32` values.
    pub fn encode_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.len() * (2 + 4 * self.dim));
        for (class, vector) in &self.entries {
            out.extend_from_slice(&class.0.to_le_bytes());
            for v in vector.to_f32() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode_binary(
        bytes: &[u8],
        role: SkbRole,
        num_classes: usize,
        dim: usize,
    ) -> Result<Self> {
        let stride = 2 + 4 * dim;
        if !bytes.len().is_multiple_of(stride) {
            return Err(Error::Protocol(format!(
                "SKB payload of {} bytes is not a multiple of {stride}",
                bytes.len()
            )));
        }
        let mut entries = BTreeMap::new();
        for chunk in bytes.chunks_exact(stride) {
            let class = ClassId(u16::from_le_bytes([chunk[0], chunk[1]])).check(num_classes)?;
            let values: Vec<f32> = chunk[2..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if entries
                .insert(class, AttributeVector::from_f32(&values)?)
                .is_some()
            {
                return Err(Error::Protocol(format!("class {class} encoded twice")));
            }
        }
        Self::new(role, num_classes, dim, entries)
    }
}

/// Finds the entry closest to `query` in Euclidean distance.
///
/// Ties go to the lowest class id.
pub fn nearest_match<'a>(
    query: &AttributeVector,
    skb: &'a Skb,
) -> Result<(ClassId, &'a AttributeVector)> {
    if skb.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    if query.dim() != skb.dim() {
        return Err(Error::DimensionMismatch {
            expected: skb.dim(),
            found: query.dim(),
        });
    }
    let mut best: Option<(f64, ClassId, &AttributeVector)> = None;
    for (class, entry) in skb.iter() {
        let dist = query.squared_distance(entry);
        match best {
            Some((d, _, _)) if dist >= d => {}
            _ => best = Some((dist, class, entry)),
        }
    }
    let (_, class, entry) = best.expect("non-empty");
    Ok((class, entry))
}

/// Local SKB update: each class entry becomes the element-wise mean of the
/// encoder's predictions for that class.
pub fn update_skb(
    predictions: &BTreeMap<ClassId, Vec<AttributeVector>>,
    num_classes: usize,
) -> Result<Skb> {
    for class in predictions.keys() {
        class.check(num_classes)?;
    }
    let mut entries = BTreeMap::new();
    let mut dim = None;
    for class in ClassId::all(num_classes) {
        let samples = match predictions.get(&class) {
            Some(s) if !s.is_empty() => s,
            _ => return Err(Error::NoSamples(class)),
        };
        let d = *dim.get_or_insert(samples[0].dim());
        // Mean taken as first sample plus the mean deviation from it, which is
        // exact when every sample is identical.
        let pivot = samples[0].values();
        let mut deviation = vec![0.0; d];
        for s in samples {
            if s.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: s.dim(),
                });
            }
            for ((acc, v), p) in deviation.iter_mut().zip(s.values()).zip(pivot) {
                *acc += v - p;
            }
        }
        let n = samples.len() as f64;
        let mean = pivot
            .iter()
            .zip(&deviation)
            .map(|(p, dev)| p + dev / n)
            .collect();
        entries.insert(class, AttributeVector::new(mean)?);
    }
    Skb::new(SkbRole::Updated, num_classes, dim.unwrap_or(0), entries)
}
