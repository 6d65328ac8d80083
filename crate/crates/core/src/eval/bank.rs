use std::fmt::Write as _;

use ndarray::Array2;

use crate::data::LabeledExample;
use crate::encoder::{EncoderPair, Side};
use crate::error::{Error, Result};
use crate::vector::{norm, ClassLabel, UNIT_NORM_TOL};

const MAGIC: &str = "#embedding-bank v1";
const EMBED_CHUNK: usize = 512;

/// `N × d'` unit-norm embeddings with labels and source ids.
///
/// Text form: a header line `#embedding-bank v1 rows=N dim=D labels=0|1`,
/// then one `source_id,label,v1,…,vD` line per row with values written to
/// nine significant digits. Unlabeled rows carry label `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    embeddings: Array2<f64>,
    labels: Vec<ClassLabel>,
    source_ids: Vec<String>,
}

impl EmbeddingBank {
    pub fn new(embeddings: Array2<f64>, labels: Vec<ClassLabel>, source_ids: Vec<String>) -> Result<Self> {
        let n = embeddings.nrows();
        if labels.len() != n || source_ids.len() != n {
            return Err(Error::shape(format!(
                "{n} embeddings with {} labels and {} source ids",
                labels.len(),
                source_ids.len()
            )));
        }
        for (index, row) in embeddings.rows().into_iter().enumerate() {
            let norm = norm(&row.to_vec());
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Normalization { index, norm });
            }
        }
        if let Some(bad) = source_ids.iter().find(|s| s.contains([',', '\n', '\r'])) {
            return Err(Error::data(format!("source id {bad:?} contains a separator")));
        }
        Ok(Self { embeddings: embeddings.as_standard_layout().into_owned(), labels, source_ids })
    }

    /// Evaluation-mode query embeddings of `examples`, labeled as given.
    pub fn from_encoder(pair: &EncoderPair, examples: &[LabeledExample]) -> Result<Self> {
        let d = pair.embedding_dim();
        let mut embeddings = Array2::zeros((examples.len(), d));
        for (start, chunk) in (0..).step_by(EMBED_CHUNK).zip(examples.chunks(EMBED_CHUNK)) {
            let width = chunk[0].input.len();
            let data: Vec<f64> = chunk.iter().flat_map(|e| e.input.iter().copied()).collect();
            let inputs = Array2::from_shape_vec((chunk.len(), width), data)
                .map_err(|_| Error::shape("examples have inconsistent input lengths"))?;
            let out = pair.embed(Side::Query, inputs.view())?;
            embeddings.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&out);
        }
        Self::new(
            embeddings,
            examples.iter().map(|e| e.label).collect(),
            examples.iter().map(|e| e.source_id.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.embeddings.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(|l| l.is_labeled())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MAGIC} rows={} dim={} labels={}\n",
            self.len(),
            self.dim(),
            u8::from(self.has_labels())
        );
        for i in 0..self.len() {
            write!(out, "{},{}", self.source_ids[i], self.labels[i]).unwrap();
            for v in self.row(i) {
                write!(out, ",{v:.8e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty embedding bank".into()))?;
        let fields = header
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Parse(format!("not an embedding bank header: {header:?}")))?;
        let mut rows = None;
        let mut dim = None;
        for kv in fields.split_whitespace() {
            match kv.split_once('=') {
                Some(("rows", v)) => rows = v.parse::<usize>().ok(),
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("labels", "0" | "1")) => {}
                _ => return Err(Error::Parse(format!("bad header field {kv:?}"))),
            }
        }
        let (rows, dim) = rows.zip(dim).ok_or_else(|| Error::Parse("header lacks rows/dim".into()))?;
        let mut data = Vec::with_capacity(rows * dim);
        let mut labels = Vec::with_capacity(rows);
        let mut ids = Vec::with_capacity(rows);
        for (n, line) in lines.enumerate() {
            let mut parts = line.split(',');
            let (Some(id), Some(label)) = (parts.next(), parts.next()) else {
                return Err(Error::Parse(format!("bank row {n}: missing fields")));
            };
            let label = label.parse::<i64>().map_err(|_| Error::Parse(format!("bank row {n}: bad label")))?;
            labels.push(ClassLabel::from_raw(label)?);
            ids.push(id.to_owned());
            let before = data.len();
            for v in parts {
                data.push(v.parse::<f64>().map_err(|_| Error::Parse(format!("bank row {n}: bad value {v:?}")))?);
            }
            if data.len() - before != dim {
                return Err(Error::Parse(format!("bank row {n}: expected {dim} values")));
            }
        }
        if labels.len() != rows {
            return Err(Error::Parse(format!("header promises {rows} rows, found {}", labels.len())));
        }
        let embeddings = Array2::from_shape_vec((rows, dim), data).expect("row count checked");
        Self::new(embeddings, labels, ids)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bank() -> EmbeddingBank {
        let s = 0.5f64.sqrt();
        EmbeddingBank::new(
            array![[1.0, 0.0], [s, -s], [0.6, 0.8]],
            vec![ClassLabel::class(0), ClassLabel::UNLABELED, ClassLabel::class(4)],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn text_round_trip_is_byte_identical() {
        let text = bank().to_text();
        assert!(text.starts_with("#embedding-bank v1 rows=3 dim=2 labels=1\n"));
        assert!(text.contains("b,-1,7.07106781e-1,-7.07106781e-1\n"));
        let back = EmbeddingBank::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.labels(), bank().labels());
    }

    #[test]
    fn empty_bank_is_header_only() {
        let empty = EmbeddingBank::new(Array2::zeros((0, 4)), vec![], vec![]).unwrap();
        assert_eq!(empty.to_text(), "#embedding-bank v1 rows=0 dim=4 labels=0\n");
        assert_eq!(EmbeddingBank::from_text(&empty.to_text()).unwrap(), empty);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(EmbeddingBank::new(array![[1.0, 1.0]], vec![ClassLabel::class(0)], vec!["x".into()]).is_err());
        assert!(EmbeddingBank::new(array![[1.0, 0.0]], vec![ClassLabel::class(0)], vec!["x,y".into()]).is_err());
        assert!(EmbeddingBank::from_text("#embedding-bank v1 rows=2 dim=2 labels=1\na,0,1,0\n").is_err());
        assert!(EmbeddingBank::from_text("hello").is_err());
    }
}
