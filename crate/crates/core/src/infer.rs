//! Document-level prediction shared by the command line and the HTTP service.

use serde::{Deserialize, Serialize};

use crate::data::{BBox, ClassSet, Document};
use crate::error::{Error, Result};
use crate::gridder::{map_pieces, read_back, GridShape};
use crate::model::{Checkpoint, CutieConfig, CutieModel};
use crate::nn::layers::IdGrid;
use crate::nn::loss::softmax;
use crate::tokenizer::{tokenize_document, Vocabulary};

/// A document to annotate. Token labels, if present, are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InferRequest {
    pub document: Document,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecePrediction {
    pub text: String,
    pub bbox: BBox,
    pub token_index: usize,
    pub piece_index: usize,
    pub class: String,
    pub confidence: f64,
    pub row: usize,
    pub col: usize,
}

/// Text predicted for one class, pieces joined in reading order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedField {
    pub class: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub grid: GridShape,
    pub pieces: Vec<PiecePrediction>,
    pub fields: Vec<ExtractedField>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: CutieConfig,
    pub classes: Vec<String>,
    pub grid: GridShape,
    pub param_count: usize,
}

/// A loaded model with everything needed to turn documents into fields.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub model: CutieModel<f32>,
    pub vocab: Vocabulary,
    pub classes: ClassSet,
    pub grid: GridShape,
}

impl Predictor {
    /// Uses the checkpoint's vocabulary, classes and grid shape; `grid`
    /// overrides the stored shape.
    pub fn from_checkpoint(ck: Checkpoint<f32>, grid: Option<GridShape>) -> Result<Self> {
        let vocab = ck
            .vocab
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary".into()))?;
        let classes = match ck.classes {
            Some(c) => c,
            None if ck.model.config.num_classes == ClassSet::receipts().len() => ClassSet::receipts(),
            None => return Err(Error::Checkpoint("checkpoint carries no class names".into())),
        };
        let grid = grid.or(ck.grid).unwrap_or_default();
        Ok(Predictor {
            model: ck.model,
            vocab,
            classes,
            grid,
        })
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            config: self.model.config.clone(),
            classes: self.classes.names().to_vec(),
            grid: self.grid,
            param_count: self.model.param_count(),
        }
    }

    pub fn predict(&self, request: &InferRequest) -> Result<InferResponse> {
        let mut doc = request.document.clone();
        for t in &mut doc.tokens {
            t.label = None;
        }
        if doc.tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("document {:?} has no tokens", doc.id)));
        }
        doc.validate(&self.classes)?;
        let pieces = tokenize_document(&doc, &self.vocab);
        let grid = map_pieces(&pieces, &vec![None; pieces.len()], (doc.width, doc.height), self.grid)?;
        let ids = IdGrid::new(1, grid.shape.rows, grid.shape.cols, grid.ids.clone())?;
        let probs = softmax(&self.model.infer(&ids)?)?;
        let (_, k, h, w) = probs.dims4()?;
        let hw = h * w;
        let p = probs.data();
        let best: Vec<(usize, f32)> = (0..hw)
            .map(|cell| {
                (0..k)
                    .map(|c| (c, p[c * hw + cell]))
                    .fold((0, f32::MIN), |acc, x| if x.1 > acc.1 { x } else { acc })
            })
            .collect();
        let classes: Vec<usize> = best.iter().map(|b| b.0).collect();
        let cells = grid.piece_cells(pieces.len());

        let mut out = Vec::with_capacity(pieces.len());
        for (piece, class) in read_back(&grid, &classes, grid.shape)? {
            let cell = cells[piece].expect("read back pieces are placed");
            let tp = &pieces[piece];
            out.push(PiecePrediction {
                text: tp.text.clone(),
                bbox: tp.bbox,
                token_index: tp.token_index,
                piece_index: tp.piece_index,
                class: self.classes.name(class).unwrap_or("?").to_string(),
                confidence: f64::from(best[cell].1).clamp(0.0, 1.0),
                row: cell / grid.shape.cols,
                col: cell % grid.shape.cols,
            });
        }
        let fields = self.fields(&out);
        Ok(InferResponse {
            id: doc.id.clone(),
            width: doc.width,
            height: doc.height,
            grid: grid.shape,
            pieces: out,
            fields,
        })
    }

    /// Joins the pieces of each non-background class in grid reading order.
    /// Pieces of one source token are concatenated, tokens are separated by a
    /// space.
    fn fields(&self, pieces: &[PiecePrediction]) -> Vec<ExtractedField> {
        let mut out = Vec::new();
        for name in self.classes.names().iter().skip(1) {
            let mut members: Vec<&PiecePrediction> = pieces.iter().filter(|p| &p.class == name).collect();
            if members.is_empty() {
                continue;
            }
            members.sort_by_key(|p| (p.row, p.col));
            let mut text = String::new();
            let mut last_token = None;
            for p in members {
                if last_token.is_some() && last_token != Some(p.token_index) {
                    text.push(' ');
                }
                text.push_str(&p.text);
                last_token = Some(p.token_index);
            }
            out.push(ExtractedField {
                class: name.clone(),
                text,
            });
        }
        out
    }
}
