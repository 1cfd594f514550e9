//! Grid positional mapping.
//!
//! A piece whose box centre lies at `(cx, cy)` in a `w x h` image lands in
//! column `floor(cols * cx / w)` and row `floor(rows * cy / h)`, clamped to
//! the grid. Pieces are placed in reading order; when a cell is taken the
//! piece moves to the nearest free cell to its right in the same row, else to
//! its left. Already-placed pieces never move. If a row is completely full
//! the grid is rebuilt with 25% more columns, at most four times.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{BBox, ClassSet, Document};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenPiece, PAD_ID};

pub const MAX_GROWTH_RETRIES: usize = 4;
pub const MIN_GRID_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < MIN_GRID_DIM || cols < MIN_GRID_DIM {
            return Err(Error::InvalidArgument(format!(
                "grid shape {rows}x{cols} is below the {MIN_GRID_DIM}x{MIN_GRID_DIM} minimum"
            )));
        }
        Ok(GridShape { rows, cols })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

impl Default for GridShape {
    fn default() -> Self {
        GridShape { rows: 64, cols: 64 }
    }
}

/// Cell `(row, col)` of a box centre.
pub fn cell_of(bbox: &BBox, doc_size: (f64, f64), shape: GridShape) -> (usize, usize) {
    let (w, h) = doc_size;
    let (cx, cy) = bbox.center();
    let index = |ratio: f64, dim: usize| -> usize {
        let v = (dim as f64 * ratio).floor();
        if v.is_nan() || v < 0.0 {
            0
        } else {
            (v as usize).min(dim - 1)
        }
    };
    (index(cy / h, shape.rows), index(cx / w, shape.cols))
}

/// Token ids on a `rows x cols` grid with per-cell labels and back-references
/// to the pieces that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub shape: GridShape,
    /// Row-major token ids; `PAD_ID` marks empty cells.
    pub ids: Vec<u32>,
    /// Ground-truth class of the piece in each cell, when known.
    pub labels: Vec<Option<usize>>,
    /// Index into the piece list for each occupied cell.
    pub pieces: Vec<Option<usize>>,
}

impl Grid {
    pub fn occupied(&self) -> usize {
        self.pieces.iter().filter(|p| p.is_some()).count()
    }

    /// Cell index of every piece, indexed by piece.
    pub fn piece_cells(&self, n_pieces: usize) -> Vec<Option<usize>> {
        let mut cells = vec![None; n_pieces];
        for (cell, p) in self.pieces.iter().enumerate() {
            if let Some(p) = p {
                cells[*p] = Some(cell);
            }
        }
        cells
    }

    /// Text matrix with one column per cell: the piece text, or `.` for empty
    /// cells. Cells are tab-separated.
    pub fn dump(&self, pieces: &[TokenPiece]) -> String {
        let mut out = String::new();
        for r in 0..self.shape.rows {
            let row: Vec<&str> = (0..self.shape.cols)
                .map(|c| match self.pieces[r * self.shape.cols + c] {
                    Some(p) => pieces[p].text.as_str(),
                    None => ".",
                })
                .collect();
            let _ = writeln!(out, "{}", row.join("\t"));
        }
        out
    }
}

/// Places `pieces` of `doc` on a grid of `shape`, growing the column count on
/// row overflow. Labels come from the source tokens via `classes`.
pub fn map_to_grid(
    doc: &Document,
    pieces: &[TokenPiece],
    classes: &ClassSet,
    shape: GridShape,
) -> Result<Grid> {
    let token_labels = doc.label_indices(classes);
    let labels: Vec<Option<usize>> = pieces
        .iter()
        .map(|p| token_labels.get(p.token_index).copied().flatten())
        .collect();
    map_pieces(pieces, &labels, (doc.width, doc.height), shape)
}

/// As [`map_to_grid`], with per-piece labels supplied directly.
pub fn map_pieces(
    pieces: &[TokenPiece],
    labels: &[Option<usize>],
    doc_size: (f64, f64),
    shape: GridShape,
) -> Result<Grid> {
    if labels.len() != pieces.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} pieces",
            labels.len(),
            pieces.len()
        )));
    }
    // Reading order: row, then centre x, then source order.
    let mut order: Vec<usize> = (0..pieces.len()).collect();
    let mut shape = shape;
    for attempt in 0..=MAX_GROWTH_RETRIES {
        let targets: Vec<(usize, usize)> = pieces
            .iter()
            .map(|p| cell_of(&p.bbox, doc_size, shape))
            .collect();
        order.sort_by(|&a, &b| {
            targets[a]
                .0
                .cmp(&targets[b].0)
                .then(pieces[a].bbox.center().0.total_cmp(&pieces[b].bbox.center().0))
                .then(a.cmp(&b))
        });
        match place(&order, &targets, shape) {
            Ok(slots) => {
                let mut grid = Grid {
                    shape,
                    ids: vec![PAD_ID; shape.cells()],
                    labels: vec![None; shape.cells()],
                    pieces: vec![None; shape.cells()],
                };
                for (p, cell) in slots.into_iter().enumerate() {
                    grid.ids[cell] = pieces[p].id;
                    grid.labels[cell] = labels[p];
                    grid.pieces[cell] = Some(p);
                }
                return Ok(grid);
            }
            Err(row) => {
                if attempt == MAX_GROWTH_RETRIES {
                    return Err(Error::RowCapacity {
                        row,
                        cols: shape.cols,
                    });
                }
                let cols = (shape.cols * 5).div_ceil(4);
                log::debug!("row {row} overflowed {} columns; retrying with {cols}", shape.cols);
                shape = GridShape { cols, ..shape };
            }
        }
    }
    unreachable!("the final attempt returns")
}

// Cell per piece, or the row that overflowed.
fn place(order: &[usize], targets: &[(usize, usize)], shape: GridShape) -> std::result::Result<Vec<usize>, usize> {
    let mut taken = vec![false; shape.cells()];
    let mut slots = vec![0; targets.len()];
    for &p in order {
        let (r, c) = targets[p];
        let row = &mut taken[r * shape.cols..(r + 1) * shape.cols];
        let col = if !row[c] {
            c
        } else if let Some(right) = (c + 1..shape.cols).find(|&x| !row[x]) {
            right
        } else if let Some(left) = (0..c).rev().find(|&x| !row[x]) {
            left
        } else {
            return Err(r);
        };
        row[col] = true;
        slots[p] = r * shape.cols + col;
    }
    Ok(slots)
}

/// Parameters of the per-sample grid-shape augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub mean_rows: usize,
    pub mean_cols: usize,
    pub sigma: f64,
    pub min: usize,
    pub max: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            mean_rows: 64,
            mean_cols: 64,
            sigma: 8.0,
            min: 32,
            max: 128,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma {} must be non-negative", self.sigma)));
        }
        if self.min < MIN_GRID_DIM || self.max < self.min {
            return Err(Error::InvalidArgument(format!(
                "clamp range [{}, {}] invalid",
                self.min, self.max
            )));
        }
        GridShape::new(self.mean_rows, self.mean_cols)?;
        Ok(())
    }

    pub fn mean_shape(&self) -> GridShape {
        GridShape {
            rows: self.mean_rows,
            cols: self.mean_cols,
        }
    }
}

/// Draws rows and columns independently from `round(Normal(mean, sigma))`,
/// clamped to `[min, max]`. With `sigma == 0` the mean is returned and no
/// random numbers are consumed.
pub fn sample_shape<R: Rng + ?Sized>(params: &AugmentParams, rng: &mut R) -> Result<GridShape> {
    params.validate()?;
    if params.sigma == 0.0 {
        return Ok(params.mean_shape());
    }
    let mut draw = |mean: usize| -> usize {
        let normal = Normal::new(mean as f64, params.sigma).expect("validated sigma");
        let v = normal.sample(rng).round();
        (v.max(0.0) as usize).clamp(params.min, params.max)
    };
    let cols = draw(params.mean_cols);
    let rows = draw(params.mean_rows);
    Ok(GridShape { rows, cols })
}

/// Attaches the predicted class of each occupied cell to its piece. Returns
/// `(piece index, class)` sorted by piece index.
pub fn read_back(grid: &Grid, class_grid: &[usize], class_shape: GridShape) -> Result<Vec<(usize, usize)>> {
    if class_shape != grid.shape || class_grid.len() != grid.shape.cells() {
        return Err(Error::Shape(format!(
            "prediction grid {}x{} ({} cells) does not match the {}x{} token grid",
            class_shape.rows,
            class_shape.cols,
            class_grid.len(),
            grid.shape.rows,
            grid.shape.cols
        )));
    }
    let mut out: Vec<(usize, usize)> = grid
        .pieces
        .iter()
        .zip(class_grid)
        .filter_map(|(p, &c)| p.map(|p| (p, c)))
        .collect();
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawToken;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn piece(id: u32, bbox: BBox, token_index: usize) -> TokenPiece {
        TokenPiece {
            text: format!("p{token_index}"),
            id,
            bbox,
            token_index,
            piece_index: 0,
        }
    }

    fn shape(r: usize, c: usize) -> GridShape {
        GridShape::new(r, c).unwrap()
    }

    #[test]
    fn cell_of_examples() {
        let s = shape(64, 64);
        let b = BBox::new(90.0, 40.0, 110.0, 60.0).unwrap();
        assert_eq!(cell_of(&b, (200.0, 100.0), s), (32, 32));
        let corner = BBox::new(200.0, 100.0, 200.0, 100.0).unwrap();
        assert_eq!(cell_of(&corner, (200.0, 100.0), s), (63, 63));
        let origin = BBox::new(0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(cell_of(&origin, (200.0, 100.0), s), (0, 0));
    }

    #[test]
    fn collision_shifts_right() {
        let b = BBox::new(90.0, 40.0, 110.0, 60.0).unwrap();
        let pieces = vec![piece(5, b, 0), piece(6, b, 1)];
        let g = map_pieces(&pieces, &[Some(1), Some(2)], (200.0, 100.0), shape(8, 8)).unwrap();
        assert_eq!(g.ids[4 * 8 + 4], 5);
        assert_eq!(g.ids[4 * 8 + 5], 6);
        assert_eq!(g.labels[4 * 8 + 5], Some(2));
    }

    #[test]
    fn collision_at_row_end_shifts_left() {
        let b = BBox::new(190.0, 40.0, 200.0, 60.0).unwrap();
        let pieces = vec![piece(5, b, 0), piece(6, b, 1)];
        let g = map_pieces(&pieces, &[None, None], (200.0, 100.0), shape(4, 4)).unwrap();
        assert_eq!(&g.ids[2 * 4..3 * 4], &[0, 0, 6, 5]);
    }

    #[test]
    fn single_piece_occupies_one_cell() {
        let b = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let g = map_pieces(&[piece(9, b, 0)], &[Some(0)], (100.0, 100.0), shape(16, 16)).unwrap();
        assert_eq!(g.occupied(), 1);
        assert_eq!(g.ids.iter().filter(|&&i| i != PAD_ID).count(), 1);
    }

    #[test]
    fn overflowing_row_grows_columns() {
        // Six pieces on one row of a 4-column grid: 4 -> 5 -> 7 columns.
        let pieces: Vec<TokenPiece> = (0..6)
            .map(|i| piece(2 + i as u32, BBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0).unwrap(), i))
            .collect();
        let g = map_pieces(&pieces, &[None; 6], (100.0, 100.0), shape(4, 4)).unwrap();
        assert_eq!(g.shape, shape(4, 7));
        assert_eq!(g.occupied(), 6);
        assert_eq!(&g.ids[..7], &[2, 3, 4, 5, 6, 7, 0]);
    }

    #[test]
    fn pathological_density_fails_after_retries() {
        // 4 * 1.25^4 -> 5, 7, 9, 12 columns; 13 pieces cannot fit.
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let pieces: Vec<TokenPiece> = (0..13).map(|i| piece(2, b, i)).collect();
        let err = map_pieces(&pieces, &[None; 13], (10.0, 10.0), shape(4, 4)).unwrap_err();
        assert!(matches!(err, Error::RowCapacity { row: 0, cols: 12 }));
    }

    #[test]
    fn map_to_grid_resolves_labels() {
        let doc = Document {
            id: "d".into(),
            width: 100.0,
            height: 100.0,
            doc_type: None,
            tokens: vec![RawToken {
                text: "x".into(),
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
                label: Some("TaxRate".into()),
            }],
        };
        let p = piece(3, doc.tokens[0].bbox, 0);
        let g = map_to_grid(&doc, &[p], &ClassSet::receipts(), shape(4, 4)).unwrap();
        assert_eq!(g.labels[0], Some(8));
    }

    #[test]
    fn sample_shape_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fixed = AugmentParams {
            sigma: 0.0,
            ..AugmentParams::default()
        };
        for _ in 0..10 {
            assert_eq!(sample_shape(&fixed, &mut rng).unwrap(), shape(64, 64));
        }
        let wide = AugmentParams {
            sigma: 1000.0,
            ..AugmentParams::default()
        };
        for _ in 0..1000 {
            let s = sample_shape(&wide, &mut rng).unwrap();
            assert!((32..=128).contains(&s.rows) && (32..=128).contains(&s.cols));
        }
    }

    #[test]
    fn sample_shape_mean_tracks_gaussian() {
        // sd of the mean of 10000 draws with sigma 8 is 0.08; 1 cell is > 12 sd.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = AugmentParams::default();
        let n = 10_000;
        let mean = (0..n).map(|_| sample_shape(&p, &mut rng).unwrap().cols as f64).sum::<f64>() / n as f64;
        assert!((mean - 64.0).abs() < 1.0, "mean {mean}");
    }

    #[test]
    fn read_back_cases() {
        let b = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let pieces = vec![piece(3, b, 0), piece(4, BBox::new(60.0, 60.0, 70.0, 70.0).unwrap(), 1)];
        let g = map_pieces(&pieces, &[None, None], (100.0, 100.0), shape(4, 4)).unwrap();
        let zeros = vec![0; 16];
        assert_eq!(read_back(&g, &zeros, g.shape).unwrap(), vec![(0, 0), (1, 0)]);
        let mut pred = vec![0; 16];
        let cell = g.piece_cells(2)[0].unwrap();
        pred[cell] = 5;
        assert_eq!(read_back(&g, &pred, g.shape).unwrap()[0], (0, 5));
        assert!(read_back(&g, &[0; 20], shape(4, 5)).is_err());
    }

    #[test]
    fn dump_marks_empty_cells() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let g = map_pieces(&[piece(3, b, 0)], &[None], (40.0, 40.0), shape(4, 4)).unwrap();
        let text = g.dump(&[piece(3, b, 0)]);
        assert_eq!(text.lines().next().unwrap(), "p0\t.\t.\t.");
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn scaling_leaves_cells_unchanged(
            x in 0.0f64..1.0, y in 0.0f64..1.0, bw in 0.0f64..0.2, bh in 0.0f64..0.2,
            scale in prop::sample::select(vec![0.5f64, 2.0, 4.0, 0.25]),
        ) {
            // Power-of-two factors scale floats exactly.
            let (w, h) = (640.0, 480.0);
            let b = BBox::new(x * w, y * h, (x + bw) * w, (y + bh) * h).unwrap();
            let s = BBox::new(b.x_left * scale, b.y_top * scale, b.x_right * scale, b.y_bottom * scale).unwrap();
            prop_assert_eq!(cell_of(&b, (w, h), shape(64, 64)), cell_of(&s, (w * scale, h * scale), shape(64, 64)));
        }

        #[test]
        fn placement_conserves_pieces(
            centers in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..60),
        ) {
            let pieces: Vec<TokenPiece> = centers
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| piece(2 + i as u32, BBox::new(x, y, x, y).unwrap(), i))
                .collect();
            let labels = vec![None; pieces.len()];
            let g = map_pieces(&pieces, &labels, (100.0, 100.0), shape(16, 16)).unwrap();
            prop_assert_eq!(g.occupied(), pieces.len());
            let again = map_pieces(&pieces, &labels, (100.0, 100.0), shape(16, 16)).unwrap();
            prop_assert_eq!(&g, &again);
            let cells = g.piece_cells(pieces.len());
            prop_assert!(cells.iter().all(Option::is_some));
        }

        #[test]
        fn cells_are_monotone_in_x(
            y in 0.0f64..100.0, x1 in 0.0f64..100.0, x2 in 0.0f64..100.0,
        ) {
            let s = shape(32, 32);
            let a = cell_of(&BBox::new(x1, y, x1, y).unwrap(), (100.0, 100.0), s);
            let b = cell_of(&BBox::new(x2, y, x2, y).unwrap(), (100.0, 100.0), s);
            if x1 < x2 {
                prop_assert!(a.1 <= b.1);
            }
        }
    }
}
