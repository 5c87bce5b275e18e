//! CSV matrix ingestion and model checkpoints.
//!
//! Checkpoints are line-oriented UTF-8 text. Every float is written through
//! its `f64` widening in the shortest decimal form that parses back to the
//! same bits, so save, load, and forward are bit-identical for both scalar
//! types. The format is self-describing: a version header, the truncation
//! policy and seeds the model was built with, then the full parameter and
//! basis payload.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CitrusError, Result};
use crate::layer::{Activation, BlockStack, CitrusBlock, CitrusModel, FieldMode, ReceptiveField};
use crate::scalar::Scalar;
use crate::spectral::{SpectralBasis, TruncationPolicy};
use crate::tensor::Matrix;

const MAGIC: &str = "citrus-checkpoint";
const VERSION: u32 = 1;

/// Parse a dense, header-free, comma-separated real matrix.
///
/// Rows are lines, fields may carry surrounding whitespace, trailing blank
/// lines are ignored, and every row must have the same width. Errors carry
/// the 1-based offending line.
pub fn parse_matrix_csv<T: Scalar>(text: &str) -> Result<Matrix<T>> {
    let mut width = 0usize;
    let mut data: Vec<T> = Vec::new();
    let mut rows = 0usize;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            // Tolerated at the end of the file only; anything after is a
            // hole in the table.
            if text.lines().skip(i).any(|l| !l.trim().is_empty()) {
                return Err(CitrusError::Parse {
                    line: lineno,
                    msg: "blank line inside the table".into(),
                });
            }
            break;
        }
        let mut count = 0usize;
        for field in line.split(',') {
            let field = field.trim();
            let v = field.parse::<f64>().map_err(|_| CitrusError::Parse {
                line: lineno,
                msg: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(CitrusError::Parse {
                    line: lineno,
                    msg: format!("non-finite entry {field:?}"),
                });
            }
            data.push(T::cast(v));
            count += 1;
        }
        if rows == 0 {
            width = count;
        } else if count != width {
            return Err(CitrusError::Parse {
                line: lineno,
                msg: format!("row has {count} fields, previous rows have {width}"),
            });
        }
        rows += 1;
    }
    if rows == 0 || width == 0 {
        return Err(CitrusError::Parse { line: 1, msg: "empty table".into() });
    }
    // Lines arrive row-major; storage is column-major.
    Ok(Matrix::from_fn(rows, width, |r, c| data[r * width + c]))
}

/// [`parse_matrix_csv`] on a file.
pub fn load_matrix_csv<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    parse_matrix_csv(&fs::read_to_string(path)?)
}

/// What a checkpoint holds besides parameters: the spectral truncation the
/// bases were produced with and the seeds that generated the run.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: CheckpointModel<T>,
    pub policy: TruncationPolicy,
    pub seeds: Vec<u64>,
}

/// Either model shape the crate trains.
#[derive(Clone, Debug)]
pub enum CheckpointModel<T> {
    Stack(BlockStack<T>),
    Model(CitrusModel<T>),
}

/// Serialize a checkpoint.
pub fn checkpoint_to_string<T: Scalar>(ck: &Checkpoint<T>) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "policy {}", ck.policy);
    let _ = write!(out, "seeds {}", ck.seeds.len());
    for s in &ck.seeds {
        let _ = write!(out, " {s}");
    }
    out.push('\n');
    match &ck.model {
        CheckpointModel::Stack(stack) => {
            let _ = writeln!(out, "kind stack");
            write_bases(&mut out, &stack.bases)?;
            let _ = writeln!(out, "blocks {}", stack.blocks.len());
            for b in &stack.blocks {
                write_block(&mut out, b)?;
            }
            match &stack.readout {
                Some(m) => {
                    let _ = writeln!(out, "readout 1");
                    write_matrix(&mut out, m)?;
                }
                None => {
                    let _ = writeln!(out, "readout 0");
                }
            }
        }
        CheckpointModel::Model(model) => {
            let _ = writeln!(out, "kind model");
            write_bases(&mut out, &model.bases)?;
            let _ = writeln!(out, "encoder");
            write_matrix(&mut out, &model.encoder)?;
            let _ = writeln!(out, "blocks {}", model.blocks.len());
            for b in &model.blocks {
                write_block(&mut out, b)?;
            }
            let _ = writeln!(out, "decoder");
            write_matrix(&mut out, &model.decoder)?;
        }
    }
    Ok(out)
}

/// Write a checkpoint file (temp file plus rename, so a crash cannot leave a
/// half-written checkpoint behind).
pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let text = checkpoint_to_string(ck)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parse a checkpoint produced by [`checkpoint_to_string`].
pub fn checkpoint_from_str<T: Scalar>(text: &str) -> Result<Checkpoint<T>> {
    let mut lines = LineCursor::new(text);
    let header = lines.next_line()?;
    let mut head = header.text.split_whitespace();
    if head.next() != Some(MAGIC) {
        return Err(parse_err(header.no, format!("missing {MAGIC:?} header")));
    }
    let version: u32 = parse_token(head.next(), header.no, "format version")?;
    if version != VERSION {
        return Err(parse_err(
            header.no,
            format!("unsupported checkpoint version {version} (this build reads {VERSION})"),
        ));
    }
    if head.next().is_some() {
        return Err(parse_err(header.no, "trailing tokens after header"));
    }

    let policy_line = lines.tagged("policy")?;
    let policy = TruncationPolicy::from_str(policy_line.text.trim())
        .map_err(|e| parse_err(policy_line.no, e.to_string()))?;

    let seeds_line = lines.tagged("seeds")?;
    let mut seed_toks = seeds_line.text.split_whitespace();
    let n_seeds: usize = parse_token(seed_toks.next(), seeds_line.no, "seed count")?;
    let mut seeds = Vec::with_capacity(n_seeds);
    for _ in 0..n_seeds {
        seeds.push(parse_token(seed_toks.next(), seeds_line.no, "seed")?);
    }
    if seed_toks.next().is_some() {
        return Err(parse_err(seeds_line.no, "more seeds than declared"));
    }

    let kind_line = lines.tagged("kind")?;
    let model = match kind_line.text.trim() {
        "stack" => {
            let bases = read_bases(&mut lines)?;
            let blocks = read_blocks(&mut lines)?;
            let readout_line = lines.tagged("readout")?;
            let readout = match readout_line.text.trim() {
                "0" => None,
                "1" => Some(read_matrix(&mut lines)?),
                other => {
                    return Err(parse_err(
                        readout_line.no,
                        format!("readout flag must be 0 or 1, got {other:?}"),
                    ))
                }
            };
            CheckpointModel::Stack(BlockStack { blocks, readout, bases })
        }
        "model" => {
            let bases = read_bases(&mut lines)?;
            lines.tagged("encoder")?;
            let encoder = read_matrix(&mut lines)?;
            let blocks = read_blocks(&mut lines)?;
            lines.tagged("decoder")?;
            let decoder = read_matrix(&mut lines)?;
            CheckpointModel::Model(CitrusModel { encoder, blocks, decoder, bases })
        }
        other => return Err(parse_err(kind_line.no, format!("unknown checkpoint kind {other:?}"))),
    };
    if let Some(extra) = lines.peek_nonblank() {
        return Err(parse_err(extra, "content after the end of the checkpoint"));
    }
    Ok(Checkpoint { model, policy, seeds })
}

/// [`checkpoint_from_str`] on a file.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}

fn fmt_float<T: Scalar>(x: T) -> Result<String> {
    if !x.is_finite() {
        return Err(CitrusError::Validation(format!(
            "checkpoint would contain the non-finite value {x}"
        )));
    }
    Ok(format!("{}", x.to_f64_lossy()))
}

fn write_floats<T: Scalar>(out: &mut String, values: impl Iterator<Item = T>) -> Result<()> {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        out.push_str(&fmt_float(v)?);
        first = false;
    }
    out.push('\n');
    Ok(())
}

fn write_matrix<T: Scalar>(out: &mut String, m: &Matrix<T>) -> Result<()> {
    let _ = writeln!(out, "matrix {} {}", m.rows(), m.cols());
    for c in 0..m.cols() {
        write_floats(out, (0..m.rows()).map(|r| m.get(r, c)))?;
    }
    Ok(())
}

fn write_bases<T: Scalar>(out: &mut String, bases: &[SpectralBasis<T>]) -> Result<()> {
    let _ = writeln!(out, "factors {}", bases.len());
    for b in bases {
        let _ = writeln!(out, "basis {} {}", b.source_n, b.k);
        write_floats(out, b.eigenvalues.iter().copied())?;
        write_matrix(out, &b.eigenvectors)?;
    }
    Ok(())
}

fn write_block<T: Scalar>(out: &mut String, block: &CitrusBlock<T>) -> Result<()> {
    let mode = match block.receptive.mode {
        FieldMode::Scalar => "scalar",
        FieldMode::PerFactor => "per_factor",
        FieldMode::PerFactorChannel => "per_factor_channel",
    };
    let _ = writeln!(
        out,
        "block {mode} {} {} {}",
        block.receptive.factors,
        block.receptive.channels,
        u8::from(block.residual)
    );
    out.push_str("times ");
    write_floats(out, block.receptive.raw.iter().copied())?;
    match block.activation {
        Activation::Identity => out.push_str("activation identity\n"),
        Activation::Relu => out.push_str("activation relu\n"),
        Activation::LeakyRelu(a) => {
            let _ = writeln!(out, "activation leaky {}", fmt_float(a)?);
        }
    }
    write_matrix(out, &block.mix_weights)?;
    let _ = writeln!(out, "mlp {}", block.mlp_weights.len());
    for w in &block.mlp_weights {
        write_matrix(out, w)?;
    }
    Ok(())
}

struct NumberedLine<'a> {
    no: usize,
    text: &'a str,
}

struct LineCursor<'a> {
    lines: std::vec::IntoIter<(usize, &'a str)>,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str) -> Self {
        let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
        LineCursor { lines: lines.into_iter() }
    }

    fn next_line(&mut self) -> Result<NumberedLine<'a>> {
        for (no, text) in self.lines.by_ref() {
            if !text.trim().is_empty() {
                return Ok(NumberedLine { no, text });
            }
        }
        Err(CitrusError::Parse { line: 0, msg: "unexpected end of checkpoint".into() })
    }

    /// Next line, which must start with `tag`; returns the rest of the line.
    fn tagged(&mut self, tag: &str) -> Result<NumberedLine<'a>> {
        let line = self.next_line()?;
        match line.text.strip_prefix(tag) {
            Some(rest) if rest.is_empty() || rest.starts_with(' ') => {
                Ok(NumberedLine { no: line.no, text: rest })
            }
            _ => Err(parse_err(
                line.no,
                format!("expected a {tag:?} line, got {:?}", line.text),
            )),
        }
    }

    /// Line number of the next non-blank line, if any (consumes blanks).
    fn peek_nonblank(&mut self) -> Option<usize> {
        self.lines.by_ref().find(|(_, t)| !t.trim().is_empty()).map(|(no, _)| no)
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> CitrusError {
    CitrusError::Parse { line, msg: msg.into() }
}

fn parse_token<V: FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<V> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse::<V>().map_err(|_| parse_err(line, format!("bad {what}: {tok:?}")))
}

fn parse_float_token<T: Scalar>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let v: f64 = parse_token(tok, line, what)?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite {what}")));
    }
    Ok(T::cast(v))
}

fn read_float_row<T: Scalar>(lines: &mut LineCursor<'_>, want: usize, what: &str) -> Result<Vec<T>> {
    let line = lines.next_line()?;
    let mut out = Vec::with_capacity(want);
    let mut toks = line.text.split_whitespace();
    for _ in 0..want {
        out.push(parse_float_token(toks.next(), line.no, what)?);
    }
    if toks.next().is_some() {
        return Err(parse_err(line.no, format!("more {what} entries than declared")));
    }
    Ok(out)
}

fn read_matrix<T: Scalar>(lines: &mut LineCursor<'_>) -> Result<Matrix<T>> {
    let head = lines.tagged("matrix")?;
    let mut toks = head.text.split_whitespace();
    let rows: usize = parse_token(toks.next(), head.no, "row count")?;
    let cols: usize = parse_token(toks.next(), head.no, "column count")?;
    if rows == 0 || cols == 0 {
        return Err(parse_err(head.no, "matrix dimensions must be positive"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..cols {
        data.extend(read_float_row::<T>(lines, rows, "matrix entry")?);
    }
    Matrix::from_col_major(rows, cols, data)
}

fn read_bases<T: Scalar>(lines: &mut LineCursor<'_>) -> Result<Vec<SpectralBasis<T>>> {
    let head = lines.tagged("factors")?;
    let n: usize = parse_token(head.text.split_whitespace().next(), head.no, "factor count")?;
    let mut bases = Vec::with_capacity(n);
    for _ in 0..n {
        let bh = lines.tagged("basis")?;
        let mut toks = bh.text.split_whitespace();
        let source_n: usize = parse_token(toks.next(), bh.no, "basis size")?;
        let k: usize = parse_token(toks.next(), bh.no, "retained pair count")?;
        if k == 0 || source_n == 0 || k > source_n {
            return Err(parse_err(bh.no, format!("bad basis dimensions {source_n} x {k}")));
        }
        let eigenvalues = read_float_row::<T>(lines, k, "eigenvalue")?;
        let eigenvectors = read_matrix::<T>(lines)?;
        if eigenvectors.rows() != source_n || eigenvectors.cols() != k {
            return Err(parse_err(
                bh.no,
                format!(
                    "eigenvector matrix is {}x{}, basis header says {source_n}x{k}",
                    eigenvectors.rows(),
                    eigenvectors.cols()
                ),
            ));
        }
        bases.push(SpectralBasis { eigenvalues, eigenvectors, source_n, k });
    }
    Ok(bases)
}

fn read_blocks<T: Scalar>(lines: &mut LineCursor<'_>) -> Result<Vec<CitrusBlock<T>>> {
    let head = lines.tagged("blocks")?;
    let n: usize = parse_token(head.text.split_whitespace().next(), head.no, "block count")?;
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        blocks.push(read_block(lines)?);
    }
    Ok(blocks)
}

fn read_block<T: Scalar>(lines: &mut LineCursor<'_>) -> Result<CitrusBlock<T>> {
    let head = lines.tagged("block")?;
    let mut toks = head.text.split_whitespace();
    let mode = match toks.next() {
        Some("scalar") => FieldMode::Scalar,
        Some("per_factor") => FieldMode::PerFactor,
        Some("per_factor_channel") => FieldMode::PerFactorChannel,
        other => return Err(parse_err(head.no, format!("unknown field mode {other:?}"))),
    };
    let factors: usize = parse_token(toks.next(), head.no, "factor count")?;
    let channels: usize = parse_token(toks.next(), head.no, "channel count")?;
    let residual = match toks.next() {
        Some("0") => false,
        Some("1") => true,
        other => return Err(parse_err(head.no, format!("residual flag must be 0 or 1, got {other:?}"))),
    };

    let times = lines.tagged("times")?;
    let mut raw = Vec::new();
    for tok in times.text.split_whitespace() {
        raw.push(parse_float_token::<T>(Some(tok), times.no, "receptive-field parameter")?);
    }
    let receptive = ReceptiveField::with_raw(mode, factors, channels, raw)
        .map_err(|e| parse_err(times.no, e.to_string()))?;

    let act_line = lines.tagged("activation")?;
    let mut act_toks = act_line.text.split_whitespace();
    let activation = match act_toks.next() {
        Some("identity") => Activation::Identity,
        Some("relu") => Activation::Relu,
        Some("leaky") => {
            Activation::LeakyRelu(parse_float_token(act_toks.next(), act_line.no, "leaky slope")?)
        }
        other => return Err(parse_err(act_line.no, format!("unknown activation {other:?}"))),
    };

    let mix_weights = read_matrix::<T>(lines)?;
    let mlp_head = lines.tagged("mlp")?;
    let n_mlp: usize =
        parse_token(mlp_head.text.split_whitespace().next(), mlp_head.no, "mlp depth")?;
    let mut mlp_weights = Vec::with_capacity(n_mlp);
    for _ in 0..n_mlp {
        mlp_weights.push(read_matrix::<T>(lines)?);
    }

    Ok(CitrusBlock { receptive, mix_weights, mlp_weights, activation, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::erdos_renyi;
    use crate::layer::{model_forward, BlockStack};
    use crate::spectral::{eigh, truncate};
    use crate::tensor::DenseTensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn csv_parses_plain_table() {
        let m = parse_matrix_csv::<f64>("1,2.5,3\n-4,0,6e-2\n").unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert_eq!(m.get(0, 1), 2.5);
        assert_eq!(m.get(1, 0), -4.0);
        assert_eq!(m.get(1, 2), 0.06);
    }

    #[test]
    fn csv_trims_spaces_and_trailing_newlines() {
        let m = parse_matrix_csv::<f64>(" 1 , 2 \n 3,4 \n\n").unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 2));
        assert_eq!(m.get(1, 1), 4.0);
    }

    #[test]
    fn csv_reports_offending_line() {
        match parse_matrix_csv::<f64>("1,2\n3,oops\n") {
            Err(CitrusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a parse error, got {other:?}"),
        }
        match parse_matrix_csv::<f64>("1,2\n3\n") {
            Err(CitrusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a ragged-row error, got {other:?}"),
        }
        match parse_matrix_csv::<f64>("") {
            Err(CitrusError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected an empty-table error, got {other:?}"),
        }
        match parse_matrix_csv::<f64>("1,2\n\n3,4\n") {
            Err(CitrusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a blank-line error, got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_non_finite() {
        assert!(matches!(
            parse_matrix_csv::<f64>("1,inf\n"),
            Err(CitrusError::Parse { line: 1, .. })
        ));
    }

    fn sample_stack(seed: u64, truncated: bool) -> BlockStack<f64> {
        let g1 = erdos_renyi::<f64>(4, 0.7, seed, true).unwrap();
        let g2 = erdos_renyi::<f64>(5, 0.6, seed + 1, true).unwrap();
        let mut b1 = eigh(g1.normalized_laplacian()).unwrap();
        let b2 = eigh(g2.normalized_laplacian()).unwrap();
        if truncated {
            b1 = truncate(&b1, 3, TruncationPolicy::Smallest).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let mk = |field: ReceptiveField<f64>, rows, cols, act, rng: &mut ChaCha8Rng| CitrusBlock {
            receptive: field,
            mix_weights: crate::layer::xavier_uniform(rows, cols, rng),
            mlp_weights: vec![crate::layer::xavier_uniform(cols, cols, rng)],
            activation: act,
            residual: false,
        };
        let blocks = vec![
            mk(
                ReceptiveField::new(FieldMode::PerFactor, 2, 1).unwrap(),
                3,
                4,
                Activation::Relu,
                &mut rng,
            ),
            mk(
                ReceptiveField::new(FieldMode::PerFactorChannel, 2, 4).unwrap(),
                4,
                2,
                Activation::LeakyRelu(0.03),
                &mut rng,
            ),
        ];
        BlockStack {
            blocks,
            readout: Some(crate::layer::xavier_uniform(2, 2, &mut rng)),
            bases: vec![b1, b2],
        }
    }

    fn bits_of(t: &DenseTensor<f64>) -> Vec<u64> {
        t.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn stack_checkpoint_round_trips_bit_exactly() {
        let stack = sample_stack(11, true);
        let ck = Checkpoint {
            model: CheckpointModel::Stack(stack.clone()),
            policy: TruncationPolicy::Smallest,
            seeds: vec![11, 12, 13],
        };
        let text = checkpoint_to_string(&ck).unwrap();
        let back = checkpoint_from_str::<f64>(&text).unwrap();
        assert_eq!(back.policy, TruncationPolicy::Smallest);
        assert_eq!(back.seeds, vec![11, 12, 13]);
        let loaded = match back.model {
            CheckpointModel::Stack(s) => s,
            _ => panic!("kind flipped in flight"),
        };
        assert_eq!(loaded.bases[0].k, 3);
        assert_eq!(loaded.blocks[1].receptive.channels, 4);

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = DenseTensor::from_fn(&[4, 5, 3], |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let a = stack.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        assert_eq!(bits_of(&a), bits_of(&b), "forward must be bit-identical after reload");
    }

    #[test]
    fn model_checkpoint_round_trips_bit_exactly() {
        let stack = sample_stack(21, false);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        // Window shape [4, 5, 3]: encoder 3 -> 3, blocks 3 -> 2, decoder rows
        // = 5 * (3 + 2).
        let model = CitrusModel {
            encoder: crate::layer::xavier_uniform(3, 3, &mut rng),
            blocks: stack.blocks.clone(),
            decoder: crate::layer::xavier_uniform(25, 6, &mut rng),
            bases: stack.bases.clone(),
        };
        let ck = Checkpoint {
            model: CheckpointModel::Model(model.clone()),
            policy: TruncationPolicy::Largest,
            seeds: vec![7],
        };
        let text = checkpoint_to_string(&ck).unwrap();
        let back = checkpoint_from_str::<f64>(&text).unwrap();
        assert_eq!(back.policy, TruncationPolicy::Largest);
        let loaded = match back.model {
            CheckpointModel::Model(m) => m,
            _ => panic!("kind flipped in flight"),
        };
        let x = DenseTensor::from_fn(&[4, 5, 3], |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let a = model_forward(&x, &model).unwrap();
        let b = model_forward(&x, &loaded).unwrap();
        assert_eq!(bits_of(&a), bits_of(&b));
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = std::env::temp_dir().join(format!("citrus-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ck");
        let ck = Checkpoint {
            model: CheckpointModel::Stack(sample_stack(31, false)),
            policy: TruncationPolicy::Smallest,
            seeds: vec![31],
        };
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(checkpoint_to_string(&ck).unwrap(), checkpoint_to_string(&back).unwrap());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn single_precision_round_trip_is_exact() {
        // Values with no short decimal expansion still survive the f32 ->
        // f64 -> text -> f64 -> f32 path.
        let vals: Vec<f32> = vec![0.1, -1.0 / 3.0, core::f32::consts::PI, 1.4e-7];
        let m = Matrix::from_col_major(2, 2, vals.clone()).unwrap();
        let mut out = String::new();
        write_matrix(&mut out, &m).unwrap();
        let mut cursor = LineCursor::new(&out);
        let back = read_matrix::<f32>(&mut cursor).unwrap();
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn loader_rejects_foreign_and_damaged_input() {
        assert!(matches!(
            checkpoint_from_str::<f64>("not-a-checkpoint 1\n"),
            Err(CitrusError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            checkpoint_from_str::<f64>(&format!("{MAGIC} 99\n")),
            Err(CitrusError::Parse { line: 1, .. })
        ));
        let good = checkpoint_to_string(&Checkpoint {
            model: CheckpointModel::Stack(sample_stack(41, false)),
            policy: TruncationPolicy::Smallest,
            seeds: vec![41],
        })
        .unwrap();
        // Chop the payload mid-matrix: the loader must fail, not fabricate.
        let cut: String = good.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(checkpoint_from_str::<f64>(&cut).is_err());
        // Appending junk after a valid checkpoint is also an error.
        let padded = format!("{good}stray\n");
        assert!(matches!(
            checkpoint_from_str::<f64>(&padded),
            Err(CitrusError::Parse { .. })
        ));
    }
}
