//! Mass-shape labels, molecular subtypes, batch shape classification,
//! accuracy reporting, and the subtype-versus-shape contingency table.
//!
//! The four shape codes and four subtype codes are fixed here once and
//! imported everywhere else, so the mapping between training labels,
//! classifier outputs, and reports can never silently permute.

use crate::error::{Error, Result};
use crate::nets::{shape_cnn_infer, Variant, Weights};
use crate::scalar::Scalar;
use crate::tensor::{stack, Tensor};
use std::fmt;
use std::str::FromStr;

/// Mass shape class. The integer codes double as row/column indices in
/// confusion and contingency tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeLabel {
    Irregular = 0,
    Lobular = 1,
    Oval = 2,
    Round = 3,
}

impl ShapeLabel {
    pub const ALL: [ShapeLabel; 4] = [
        ShapeLabel::Irregular,
        ShapeLabel::Lobular,
        ShapeLabel::Oval,
        ShapeLabel::Round,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL.get(code).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "shape code {code} out of range 0..=3"
            ))
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeLabel::Irregular => "irregular",
            ShapeLabel::Lobular => "lobular",
            ShapeLabel::Oval => "oval",
            ShapeLabel::Round => "round",
        }
    }
}

impl fmt::Display for ShapeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "irregular" | "0" => Ok(ShapeLabel::Irregular),
            "lobular" | "1" => Ok(ShapeLabel::Lobular),
            "oval" | "2" => Ok(ShapeLabel::Oval),
            "round" | "3" => Ok(ShapeLabel::Round),
            other => Err(Error::InvalidArgument(format!(
                "unknown shape label '{other}' (expected irregular, \
                 lobular, oval or round)"
            ))),
        }
    }
}

/// Breast-cancer molecular subtype. Codes fix the contingency row
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subtype {
    LuminalA = 0,
    LuminalB = 1,
    Her2 = 2,
    BasalLike = 3,
}

impl Subtype {
    pub const ALL: [Subtype; 4] = [
        Subtype::LuminalA,
        Subtype::LuminalB,
        Subtype::Her2,
        Subtype::BasalLike,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL.get(code).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "subtype code {code} out of range 0..=3"
            ))
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtype::LuminalA => "luminal-a",
            Subtype::LuminalB => "luminal-b",
            Subtype::Her2 => "her2",
            Subtype::BasalLike => "basal-like",
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // Lenient spelling: ignore case, hyphens and underscores, so
        // "Luminal-A", "luminal_a" and "luminala" all parse.
        let folded: String = s
            .trim()
            .chars()
            .filter(|c| *c != '-' && *c != '_' && *c != ' ')
            .collect::<String>()
            .to_ascii_lowercase();
        match folded.as_str() {
            "luminala" => Ok(Subtype::LuminalA),
            "luminalb" => Ok(Subtype::LuminalB),
            "her2" => Ok(Subtype::Her2),
            "basallike" => Ok(Subtype::BasalLike),
            _ => Err(Error::InvalidArgument(format!(
                "unknown subtype '{}' (expected luminal-a, luminal-b, \
                 her2 or basal-like)",
                s.trim()
            ))),
        }
    }
}

/// Checks that a mask holds only exact 0.0 / 1.0 values.
fn require_binary<S: Scalar>(mask: &Tensor<S>, index: usize) -> Result<()> {
    for &v in mask.data() {
        if v != S::zero() && v != S::one() {
            return Err(Error::InvalidArgument(format!(
                "mask {index} is not binary: found value {v}"
            )));
        }
    }
    Ok(())
}

/// Classifies each binary mask with a trained shape network. Labels are
/// the argmax class per mask; exact probability ties resolve to the
/// lowest code.
pub fn classify_shapes<S: Scalar>(
    weights: &Weights<S>,
    masks: &[Tensor<S>],
) -> Result<Vec<ShapeLabel>> {
    if weights.spec().variant != Variant::ShapeCnn {
        return Err(Error::InvalidArgument(format!(
            "classify_shapes needs shapecnn weights, got {}",
            weights.spec().variant
        )));
    }
    if masks.is_empty() {
        return Err(Error::InvalidArgument(
            "classify_shapes needs at least one mask".into(),
        ));
    }
    let res = weights.spec().input_resolution;
    let mut lifted = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        // Accept [res, res] or the canonical [1, res, res].
        let canonical = match mask.shape() {
            [h, w] if *h == res && *w == res => mask.reshape(&[1, res, res])?,
            [1, h, w] if *h == res && *w == res => mask.clone(),
            other => {
                return Err(Error::ShapeMismatch(format!(
                    "mask {i} has shape {other:?}, expected [1, {res}, {res}]"
                )))
            }
        };
        require_binary(&canonical, i)?;
        lifted.push(canonical);
    }
    let batch = stack(&lifted)?;
    let probs = shape_cnn_infer(weights, &batch)?;
    let mut labels = Vec::with_capacity(masks.len());
    for row in probs.data().chunks_exact(4) {
        let mut best = 0usize;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        labels.push(ShapeLabel::from_code(best)?);
    }
    Ok(labels)
}

/// Fraction of exact matches plus the 4x4 confusion matrix
/// (rows = truth, columns = predicted).
pub fn shape_accuracy(
    predicted: &[ShapeLabel],
    truth: &[ShapeLabel],
) -> Result<(f64, [[u64; 4]; 4])> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "predicted/truth length mismatch: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::InvalidArgument(
            "shape_accuracy needs at least one pair".into(),
        ));
    }
    let mut confusion = [[0u64; 4]; 4];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t.code()][p.code()] += 1;
    }
    let trace: u64 = (0..4).map(|i| confusion[i][i]).sum();
    Ok((trace as f64 / predicted.len() as f64, confusion))
}

/// Cross-tabulation of molecular subtype (rows, in code order
/// luminal-a, luminal-b, her2, basal-like) against predicted shape
/// (columns, in code order irregular, lobular, oval, round).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContingencyTable {
    cells: [[u64; 4]; 4],
}

impl ContingencyTable {
    /// Tabulates (subtype, shape) pairs. Order of the input never
    /// matters; the table is a pure count.
    pub fn from_pairs(pairs: &[(Subtype, ShapeLabel)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(
                "contingency needs at least one pair".into(),
            ));
        }
        let mut cells = [[0u64; 4]; 4];
        for &(subtype, shape) in pairs {
            cells[subtype.code()][shape.code()] += 1;
        }
        Ok(Self { cells })
    }

    pub fn cell(&self, subtype: Subtype, shape: ShapeLabel) -> u64 {
        self.cells[subtype.code()][shape.code()]
    }

    pub fn row(&self, subtype: Subtype) -> [u64; 4] {
        self.cells[subtype.code()]
    }

    pub fn row_total(&self, subtype: Subtype) -> u64 {
        self.cells[subtype.code()].iter().sum()
    }

    pub fn col_total(&self, shape: ShapeLabel) -> u64 {
        (0..4).map(|r| self.cells[r][shape.code()]).sum()
    }

    pub fn grand_total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }

    /// CSV rendering: header, one row per subtype with its total, and a
    /// final column-totals row. Stable byte-for-byte across runs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subtype,irregular,lobular,oval,round,total\n");
        for subtype in Subtype::ALL {
            let row = self.row(subtype);
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                subtype,
                row[0],
                row[1],
                row[2],
                row[3],
                self.row_total(subtype)
            ));
        }
        out.push_str(&format!(
            "total,{},{},{},{},{}\n",
            self.col_total(ShapeLabel::Irregular),
            self.col_total(ShapeLabel::Lobular),
            self.col_total(ShapeLabel::Oval),
            self.col_total(ShapeLabel::Round),
            self.grand_total()
        ));
        out
    }

    /// Aligned plain-text rendering for terminals and logs.
    pub fn to_text(&self) -> String {
        let headers = ["subtype", "irregular", "lobular", "oval", "round", "total"];
        let mut rows: Vec<[String; 6]> = Vec::with_capacity(5);
        for subtype in Subtype::ALL {
            let r = self.row(subtype);
            rows.push([
                subtype.to_string(),
                r[0].to_string(),
                r[1].to_string(),
                r[2].to_string(),
                r[3].to_string(),
                self.row_total(subtype).to_string(),
            ]);
        }
        rows.push([
            "total".into(),
            self.col_total(ShapeLabel::Irregular).to_string(),
            self.col_total(ShapeLabel::Lobular).to_string(),
            self.col_total(ShapeLabel::Oval).to_string(),
            self.col_total(ShapeLabel::Round).to_string(),
            self.grand_total().to_string(),
        ]);
        let mut widths = [0usize; 6];
        for (i, h) in headers.iter().enumerate() {
            widths[i] = h.len();
        }
        for row in &rows {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.len());
            }
        }
        let mut out = String::new();
        let push_row = |cells: &[String; 6], out: &mut String| {
            // First column left-aligned, counts right-aligned.
            out.push_str(&format!("{:<w$}", cells[0], w = widths[0]));
            for i in 1..6 {
                out.push_str(&format!("  {:>w$}", cells[i], w = widths[i]));
            }
            out.push('\n');
        };
        let header_row: [String; 6] =
            std::array::from_fn(|i| headers[i].to_string());
        push_row(&header_row, &mut out);
        for row in &rows {
            push_row(row, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetworkSpec;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// The published hospital-dataset distribution: 194 masses across
    /// four molecular subtypes and four predicted shapes.
    fn hospital_pairs() -> Vec<(Subtype, ShapeLabel)> {
        let counts: [[u64; 4]; 4] = [
            [24, 19, 19, 2],
            [23, 27, 8, 1],
            [7, 3, 10, 14],
            [2, 13, 4, 18],
        ];
        let mut pairs = Vec::new();
        for (r, row) in counts.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    pairs.push((
                        Subtype::from_code(r).unwrap(),
                        ShapeLabel::from_code(c).unwrap(),
                    ));
                }
            }
        }
        pairs
    }

    #[test]
    fn hospital_table_csv_is_exact() {
        let table = ContingencyTable::from_pairs(&hospital_pairs()).unwrap();
        let expect = "subtype,irregular,lobular,oval,round,total\n\
                      luminal-a,24,19,19,2,64\n\
                      luminal-b,23,27,8,1,59\n\
                      her2,7,3,10,14,34\n\
                      basal-like,2,13,4,18,37\n\
                      total,56,62,41,35,194\n";
        assert_eq!(table.to_csv(), expect);
        assert_eq!(table.row_total(Subtype::LuminalA), 64);
        assert_eq!(table.row_total(Subtype::LuminalB), 59);
        assert_eq!(table.row_total(Subtype::Her2), 34);
        assert_eq!(table.row_total(Subtype::BasalLike), 37);
        assert_eq!(table.grand_total(), 194);
    }

    #[test]
    fn hospital_table_text_is_aligned() {
        let table = ContingencyTable::from_pairs(&hospital_pairs()).unwrap();
        let text = table.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        let width = lines[0].len();
        for line in &lines {
            assert_eq!(line.len(), width, "ragged line: {line:?}");
        }
        assert!(lines[1].starts_with("luminal-a"));
        assert!(lines[5].ends_with("194"));
    }

    #[test]
    fn single_pair_table() {
        let table = ContingencyTable::from_pairs(&[(
            Subtype::Her2,
            ShapeLabel::Oval,
        )])
        .unwrap();
        let mut ones = 0;
        let mut zeros = 0;
        for subtype in Subtype::ALL {
            for shape in ShapeLabel::ALL {
                match table.cell(subtype, shape) {
                    0 => zeros += 1,
                    1 => ones += 1,
                    other => panic!("unexpected count {other}"),
                }
            }
        }
        assert_eq!((ones, zeros), (1, 15));
        assert_eq!(table.grand_total(), 1);
    }

    #[test]
    fn empty_pairs_rejected() {
        assert!(ContingencyTable::from_pairs(&[]).is_err());
    }

    #[test]
    fn permuting_pairs_preserves_table() {
        let mut pairs = hospital_pairs();
        let original = ContingencyTable::from_pairs(&pairs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            pairs.shuffle(&mut rng);
            let shuffled = ContingencyTable::from_pairs(&pairs).unwrap();
            assert_eq!(shuffled, original);
        }
    }

    #[test]
    fn row_totals_match_input_multiplicity() {
        let pairs = hospital_pairs();
        let table = ContingencyTable::from_pairs(&pairs).unwrap();
        for subtype in Subtype::ALL {
            let expect =
                pairs.iter().filter(|(s, _)| *s == subtype).count() as u64;
            assert_eq!(table.row_total(subtype), expect);
            assert_eq!(
                table.row(subtype).iter().sum::<u64>(),
                table.row_total(subtype)
            );
        }
        assert_eq!(table.grand_total(), pairs.len() as u64);
    }

    #[test]
    fn accuracy_identical_lists() {
        let labels = vec![
            ShapeLabel::Irregular,
            ShapeLabel::Lobular,
            ShapeLabel::Oval,
            ShapeLabel::Round,
            ShapeLabel::Oval,
        ];
        let (acc, confusion) = shape_accuracy(&labels, &labels).unwrap();
        assert_eq!(acc, 1.0);
        for r in 0..4 {
            for c in 0..4 {
                if r != c {
                    assert_eq!(confusion[r][c], 0);
                }
            }
        }
        assert_eq!(confusion[2][2], 2);
    }

    #[test]
    fn accuracy_fully_mismatched() {
        let predicted = vec![ShapeLabel::Irregular, ShapeLabel::Round];
        let truth = vec![ShapeLabel::Round, ShapeLabel::Irregular];
        let (acc, confusion) = shape_accuracy(&predicted, &truth).unwrap();
        assert_eq!(acc, 0.0);
        assert_eq!(confusion[3][0], 1);
        assert_eq!(confusion[0][3], 1);
    }

    #[test]
    fn accuracy_matches_counting_oracle() {
        let predicted: Vec<ShapeLabel> = [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]
            .iter()
            .map(|&c| ShapeLabel::from_code(c).unwrap())
            .collect();
        let truth: Vec<ShapeLabel> = [0, 1, 1, 3, 2, 1, 2, 0, 0, 3]
            .iter()
            .map(|&c| ShapeLabel::from_code(c).unwrap())
            .collect();
        let (acc, confusion) = shape_accuracy(&predicted, &truth).unwrap();
        let mut hits = 0u64;
        let mut oracle = [[0u64; 4]; 4];
        for (p, t) in predicted.iter().zip(&truth) {
            oracle[t.code()][p.code()] += 1;
            if p == t {
                hits += 1;
            }
        }
        assert_eq!(confusion, oracle);
        assert_eq!(acc, hits as f64 / 10.0);
        let trace: u64 = (0..4).map(|i| confusion[i][i]).sum();
        let total: u64 = confusion.iter().flatten().sum();
        assert_eq!(acc, trace as f64 / total as f64);
    }

    #[test]
    fn accuracy_rejects_mismatched_or_empty() {
        let a = vec![ShapeLabel::Oval];
        assert!(shape_accuracy(&a, &[]).is_err());
        assert!(shape_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn degenerate_network_ties_to_lowest_code() {
        // All-zero weights make every logit zero, so the softmax is
        // uniform and the tie rule must pick code 0 for every mask.
        let spec = NetworkSpec::new(Variant::ShapeCnn, 8, 2, 4).unwrap();
        let mut weights = crate::nets::build::<f64>(&spec, 3).unwrap();
        for tensor in weights.tensors_mut() {
            *tensor = Tensor::zeros(tensor.shape()).unwrap();
        }
        let masks = vec![
            Tensor::zeros(&[1, 8, 8]).unwrap(),
            Tensor::full(&[1, 8, 8], 1.0).unwrap(),
        ];
        let labels = classify_shapes(&weights, &masks).unwrap();
        assert_eq!(labels, vec![ShapeLabel::Irregular; 2]);
    }

    #[test]
    fn classify_output_length_and_validation() {
        let spec = NetworkSpec::new(Variant::ShapeCnn, 8, 2, 4).unwrap();
        let weights = crate::nets::build::<f64>(&spec, 9).unwrap();
        let masks: Vec<Tensor<f64>> = (0..5)
            .map(|i| {
                let mut m = vec![0.0; 64];
                m[i] = 1.0;
                Tensor::from_vec(&[1, 8, 8], m).unwrap()
            })
            .collect();
        assert_eq!(classify_shapes(&weights, &masks).unwrap().len(), 5);

        // Rank-2 masks are lifted.
        let flat = vec![Tensor::<f64>::zeros(&[8, 8]).unwrap()];
        assert_eq!(classify_shapes(&weights, &flat).unwrap().len(), 1);

        // Wrong resolution and non-binary values are rejected.
        let wrong = vec![Tensor::<f64>::zeros(&[1, 4, 4]).unwrap()];
        assert!(classify_shapes(&weights, &wrong).is_err());
        let soft = vec![Tensor::<f64>::full(&[1, 8, 8], 0.5).unwrap()];
        assert!(classify_shapes(&weights, &soft).is_err());
        assert!(classify_shapes(&weights, &[]).is_err());
        let gen_spec = NetworkSpec::new(Variant::GenUnet, 8, 2, 4).unwrap();
        let gen_weights = crate::nets::build::<f64>(&gen_spec, 1).unwrap();
        let ok = vec![Tensor::<f64>::zeros(&[1, 8, 8]).unwrap()];
        assert!(classify_shapes(&gen_weights, &ok).is_err());
    }

    #[test]
    fn label_round_trips() {
        for shape in ShapeLabel::ALL {
            assert_eq!(
                shape.to_string().parse::<ShapeLabel>().unwrap(),
                shape
            );
            assert_eq!(ShapeLabel::from_code(shape.code()).unwrap(), shape);
        }
        for subtype in Subtype::ALL {
            assert_eq!(subtype.to_string().parse::<Subtype>().unwrap(), subtype);
            assert_eq!(Subtype::from_code(subtype.code()).unwrap(), subtype);
        }
        assert_eq!("Luminal_A".parse::<Subtype>().unwrap(), Subtype::LuminalA);
        assert_eq!("HER2".parse::<Subtype>().unwrap(), Subtype::Her2);
        assert_eq!("Basal-Like".parse::<Subtype>().unwrap(), Subtype::BasalLike);
        assert!("luminal-c".parse::<Subtype>().is_err());
        assert!("square".parse::<ShapeLabel>().is_err());
        assert!(ShapeLabel::from_code(4).is_err());
        assert!(Subtype::from_code(7).is_err());
    }
}
