//! Seeded generator of receipt-like OCR documents.
//!
//! Each document is a short Spanish/English receipt (taxi, meals or hotel)
//! with a vendor header, tax id, date, invoice number, item lines, base
//! amount, tax rate, tax amount and total. Keywords ("TOTAL", "IVA", "FECHA",
//! ...) are labeled `DontCare`; the values next to them carry the key class.
//! Item prices, cash and change amounts act as unlabeled distractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BBox, Document, RawToken};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutStyle {
    /// Keys flush left, values flush right.
    TwoColumn,
    /// Every line centered.
    Centered,
    /// Left aligned with a random indent per line and loose key/value gaps.
    Ragged,
}

const STYLES: [LayoutStyle; 3] = [LayoutStyle::TwoColumn, LayoutStyle::Centered, LayoutStyle::Ragged];

pub const DOC_TYPES: [&str; 3] = ["taxi", "meals", "hotel"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_documents: usize,
    /// Probabilities of two-column, centered and ragged layouts.
    pub style_weights: [f64; 3],
    /// Maximum per-token displacement in pixels, applied independently to x and y.
    pub jitter: f64,
    /// Probability that each key field appears in a document.
    pub field_presence: f64,
    /// Range of the line-spacing multiplier.
    pub line_spacing: (f64, f64),
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n_documents: usize, seed: u64) -> Self {
        SynthSpec {
            n_documents,
            style_weights: [0.4, 0.3, 0.3],
            jitter: 1.5,
            field_presence: 1.0,
            line_spacing: (1.0, 1.5),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_documents == 0 {
            return Err(Error::InvalidArgument("n_documents must be at least 1".into()));
        }
        let sum: f64 = self.style_weights.iter().sum();
        if self.style_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "style weights {:?} must be non-negative and sum to 1",
                self.style_weights
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidArgument("jitter must be a non-negative number".into()));
        }
        if !(0.0..=1.0).contains(&self.field_presence) {
            return Err(Error::InvalidArgument("field presence must be a probability".into()));
        }
        let (lo, hi) = self.line_spacing;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument("line spacing range must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// Generates `spec.n_documents` documents. Document `i` draws from its own
/// ChaCha stream `(seed, i)`, so output is independent of generation order.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    Ok((0..spec.n_documents).map(|i| generate_one(spec, i)).collect())
}

#[derive(Clone, Copy, PartialEq)]
enum LineKind {
    Header,
    KeyValue,
    Plain,
}

struct Line {
    kind: LineKind,
    /// (text, label) per word; for key/value lines the value words come last.
    words: Vec<(String, &'static str)>,
    /// Number of leading key words on a key/value line.
    key_len: usize,
}

impl Line {
    fn plain(kind: LineKind, text: &str) -> Self {
        Line {
            kind,
            words: text.split_whitespace().map(|w| (w.to_string(), "DontCare")).collect(),
            key_len: 0,
        }
    }

    fn key_value(key: &str, values: Vec<(String, &'static str)>) -> Self {
        let mut words: Vec<(String, &'static str)> =
            key.split_whitespace().map(|w| (w.to_string(), "DontCare")).collect();
        let key_len = words.len();
        words.extend(values);
        Line {
            kind: LineKind::KeyValue,
            words,
            key_len,
        }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

struct Money {
    decimal_comma: bool,
}

impl Money {
    fn format(&self, cents: u64) -> String {
        let sep = if self.decimal_comma { ',' } else { '.' };
        format!("{}{}{:02}", cents / 100, sep, cents % 100)
    }
}

const VENDOR_HEAD: [&[&str]; 3] = [
    &["TAXI", "RADIO TAXI", "TELE TAXI", "CAB"],
    &["RESTAURANTE", "BAR", "CAFETERIA", "ASADOR", "MESON", "PIZZERIA"],
    &["HOTEL", "HOSTAL", "PARADOR", "APARTHOTEL"],
];
const VENDOR_NAME: [&str; 24] = [
    "SOL", "LUNA", "MAYOR", "PLAZA", "REAL", "CENTRAL", "IBERIA", "NORTE", "SUR", "PALACE",
    "CASA", "PEPE", "LOLA", "GRAN", "VIA", "PUERTA", "ALCALA", "MARINA", "JARDIN", "ROYAL",
    "MADRID", "TRIANA", "DELICIAS", "ESTRELLA",
];
const STREETS: [&str; 8] = [
    "C/ MAYOR", "AVDA. DIAGONAL", "C/ ALCALA", "PASEO PRADO", "C/ SERRANO", "AV. LIBERTAD",
    "C/ SOL", "RONDA SUR",
];
const CITIES: [&str; 6] = ["MADRID", "BARCELONA", "SEVILLA", "VALENCIA", "BILBAO", "MALAGA"];
const ITEMS: [&[&str]; 3] = [
    &["TARIFA 1", "TARIFA 2", "SUPLEMENTO", "AEROPUERTO", "EQUIPAJE", "KM"],
    &["CAFE", "MENU DIA", "AGUA", "CERVEZA", "PAN", "POSTRE", "VINO TINTO", "ENSALADA", "TOSTADA"],
    &["NOCHE", "HABITACION DOBLE", "DESAYUNO", "PARKING", "MINIBAR", "TASA TURISTICA"],
];

fn generate_one(spec: &SynthSpec, index: usize) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let type_idx = index % DOC_TYPES.len();

    let style = {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = STYLES[STYLES.len() - 1];
        for (s, w) in STYLES.iter().zip(spec.style_weights) {
            acc += w;
            if u < acc {
                chosen = *s;
                break;
            }
        }
        chosen
    };
    let lines = receipt_lines(&mut rng, type_idx, spec.field_presence);
    let tokens_and_size = layout(&mut rng, &lines, style, spec);

    Document {
        id: format!("{}-{:05}", DOC_TYPES[type_idx], index),
        width: tokens_and_size.1,
        height: tokens_and_size.2,
        doc_type: Some(DOC_TYPES[type_idx].to_string()),
        tokens: tokens_and_size.0,
    }
}

fn receipt_lines(rng: &mut ChaCha8Rng, type_idx: usize, presence: f64) -> Vec<Line> {
    let present = |rng: &mut ChaCha8Rng| presence >= 1.0 || rng.random::<f64>() < presence;
    let money = Money {
        decimal_comma: rng.random_bool(0.7),
    };
    let mut lines = Vec::new();

    if present(rng) {
        let mut words: Vec<String> = pick(rng, VENDOR_HEAD[type_idx])
            .split_whitespace()
            .map(str::to_string)
            .collect();
        for _ in 0..rng.random_range(1..=2) {
            words.push(pick(rng, &VENDOR_NAME).to_string());
        }
        lines.push(Line {
            kind: LineKind::Header,
            words: words.into_iter().map(|w| (w, "VendorName")).collect(),
            key_len: 0,
        });
    }
    let street = format!("{} {}", pick(rng, &STREETS), rng.random_range(1..200));
    lines.push(Line::plain(LineKind::Header, &street));
    let city = format!("{} {}", rng.random_range(8000..50000), pick(rng, &CITIES));
    lines.push(Line::plain(LineKind::Header, &city));

    let mut header_fields: Vec<Line> = Vec::new();
    if present(rng) {
        let letter = (b'A' + rng.random_range(0..8u8)) as char;
        let id = format!("{letter}{:08}", rng.random_range(0..100_000_000u32));
        header_fields.push(Line::key_value(
            pick(rng, &["CIF:", "NIF:", "C.I.F.", "TAX ID", "N.I.F."]),
            vec![(id, "VendorTaxID")],
        ));
    }
    if present(rng) {
        let (d, m, y) = (rng.random_range(1..=28), rng.random_range(1..=12), rng.random_range(2015..=2020));
        let date = if rng.random_bool(0.5) {
            format!("{d:02}/{m:02}/{y}")
        } else {
            format!("{d:02}-{m:02}-{:02}", y % 100)
        };
        let mut values = vec![(date, "InvoiceDate")];
        if rng.random_bool(0.5) {
            values.push((
                format!("{:02}:{:02}", rng.random_range(0..24), rng.random_range(0..60)),
                "DontCare",
            ));
        }
        header_fields.push(Line::key_value(pick(rng, &["FECHA:", "FECHA", "DATE", "FECHA EMISION"]), values));
    }
    if present(rng) {
        let number = if rng.random_bool(0.5) {
            format!("F{}-{:05}", rng.random_range(2015..=2020), rng.random_range(0..100_000))
        } else {
            format!("{:06}", rng.random_range(0..1_000_000))
        };
        header_fields.push(Line::key_value(
            pick(rng, &["FACTURA", "N. FACTURA", "TICKET", "INVOICE NO", "FRA. SIMPLIFICADA"]),
            vec![(number, "InvoiceNumber")],
        ));
    }
    // Header field order varies between documents.
    for i in (1..header_fields.len()).rev() {
        let j = rng.random_range(0..=i);
        header_fields.swap(i, j);
    }
    lines.extend(header_fields);

    let mut base_cents = 0;
    for _ in 0..rng.random_range(1..=4) {
        let qty = rng.random_range(1..=3u64);
        let price = rng.random_range(150..4500u64);
        base_cents += qty * price;
        let name = pick(rng, ITEMS[type_idx]);
        lines.push(Line::plain(
            LineKind::Plain,
            &format!("{qty} {name} {}", money.format(qty * price)),
        ));
    }

    let rate: u64 = *[10u64, 21, 4].get(rng.random_range(0..3)).unwrap();
    let tax_cents = (base_cents * rate + 50) / 100;
    let total_cents = base_cents + tax_cents;
    let rate_text = if rng.random_bool(0.5) {
        format!("{rate}%")
    } else {
        format!("{rate},00%")
    };

    let has_base = present(rng);
    let has_rate = present(rng);
    let has_tax = present(rng);
    if has_base {
        lines.push(Line::key_value(
            pick(rng, &["BASE IMPONIBLE", "BASE", "SUBTOTAL", "NETO"]),
            vec![(money.format(base_cents), "BaseAmount")],
        ));
    }
    if has_rate && has_tax && rng.random_bool(0.5) {
        lines.push(Line::key_value(
            pick(rng, &["IVA", "VAT"]),
            vec![(rate_text, "TaxRate"), (money.format(tax_cents), "TaxAmount")],
        ));
    } else {
        if has_rate {
            lines.push(Line::key_value(
                pick(rng, &["TIPO IVA", "% IVA", "VAT RATE"]),
                vec![(rate_text, "TaxRate")],
            ));
        }
        if has_tax {
            lines.push(Line::key_value(
                pick(rng, &["CUOTA IVA", "IMPORTE IVA", "VAT AMOUNT", "IVA"]),
                vec![(money.format(tax_cents), "TaxAmount")],
            ));
        }
    }
    if present(rng) {
        let mut values = vec![(money.format(total_cents), "ExpenseAmount")];
        if rng.random_bool(0.3) {
            values.push(("EUR".to_string(), "DontCare"));
        }
        lines.push(Line::key_value(
            pick(rng, &["TOTAL", "TOTAL EUR", "IMPORTE TOTAL", "TOTAL A PAGAR"]),
            values,
        ));
    }
    if rng.random_bool(0.5) {
        let paid = (total_cents / 500 + 1) * 500;
        lines.push(Line::key_value("EFECTIVO", vec![(money.format(paid), "DontCare")]));
        lines.push(Line::key_value("CAMBIO", vec![(money.format(paid - total_cents), "DontCare")]));
    }
    let footer = pick(
        rng,
        &["GRACIAS POR SU VISITA", "THANK YOU", "IVA INCLUIDO", "VUELVA PRONTO"],
    );
    lines.push(Line::plain(LineKind::Plain, footer));
    lines
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn layout(
    rng: &mut ChaCha8Rng,
    lines: &[Line],
    style: LayoutStyle,
    spec: &SynthSpec,
) -> (Vec<RawToken>, f64, f64) {
    let char_w = rng.random_range(7.0..11.0);
    let text_h = char_w * 1.6;
    let spacing = if spec.line_spacing.0 == spec.line_spacing.1 {
        spec.line_spacing.0
    } else {
        rng.random_range(spec.line_spacing.0..spec.line_spacing.1)
    };
    let line_h = text_h * 1.4 * spacing;
    let margin = char_w * rng.random_range(2.0..5.0);
    let text_width = |s: &str| s.chars().count() as f64 * char_w;
    let span = |words: &[(String, &str)]| {
        words.iter().map(|(w, _)| text_width(w)).sum::<f64>()
            + char_w * words.len().saturating_sub(1) as f64
    };
    let widest = lines.iter().map(|l| span(&l.words)).fold(0.0, f64::max);
    let width = round2(widest + 2.0 * margin + char_w * rng.random_range(4.0..16.0));
    let top = margin + rng.random_range(0.0..3.0) * line_h;
    let height = round2(top + lines.len() as f64 * line_h + margin);

    let mut tokens = Vec::new();
    for (li, line) in lines.iter().enumerate() {
        let y = top + li as f64 * line_h;
        // Starting x of every word on this line.
        let mut xs = Vec::with_capacity(line.words.len());
        let flow = |start: f64, words: &[(String, &str)], xs: &mut Vec<f64>| {
            let mut x = start;
            for (w, _) in words {
                xs.push(x);
                x += text_width(w) + char_w;
            }
        };
        match (style, line.kind) {
            (LayoutStyle::Centered, _) => {
                flow((width - span(&line.words)) / 2.0, &line.words, &mut xs);
            }
            (LayoutStyle::TwoColumn, LineKind::KeyValue) => {
                let (key, value) = line.words.split_at(line.key_len);
                flow(margin, key, &mut xs);
                flow(width - margin - span(value), value, &mut xs);
            }
            (LayoutStyle::TwoColumn, _) => flow(margin, &line.words, &mut xs),
            (LayoutStyle::Ragged, LineKind::KeyValue) => {
                let indent = margin + char_w * rng.random_range(0..4) as f64;
                let (key, value) = line.words.split_at(line.key_len);
                flow(indent, key, &mut xs);
                let gap = char_w * rng.random_range(1..8) as f64;
                let after_key = indent + span(key) + char_w;
                let start = (after_key - char_w + gap)
                    .min(width - margin - span(value))
                    .max(after_key);
                flow(start, value, &mut xs);
            }
            (LayoutStyle::Ragged, _) => {
                let indent = margin + char_w * rng.random_range(0..4) as f64;
                flow(indent, &line.words, &mut xs);
            }
        }
        for ((text, label), x) in line.words.iter().zip(xs) {
            let (dx, dy) = if spec.jitter > 0.0 {
                (
                    rng.random_range(-spec.jitter..=spec.jitter),
                    rng.random_range(-spec.jitter..=spec.jitter),
                )
            } else {
                (0.0, 0.0)
            };
            let x0 = (x + dx).clamp(0.0, width - text_width(text));
            let y0 = (y + dy).clamp(0.0, height - text_h);
            tokens.push(RawToken {
                text: text.clone(),
                bbox: BBox {
                    x_left: round2(x0),
                    y_top: round2(y0),
                    x_right: round2(x0 + text_width(text)),
                    y_bottom: round2(y0 + text_h),
                },
                label: Some(label.to_string()),
            });
        }
    }
    (tokens, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_dataset, ClassSet};
    use std::collections::HashSet;

    #[test]
    fn same_seed_is_byte_identical() {
        let spec = SynthSpec::new(20, 7);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset(&mut a, &synth_generate(&spec).unwrap()).unwrap();
        write_dataset(&mut b, &synth_generate(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_dataset(&mut c, &synth_generate(&SynthSpec::new(20, 8)).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn documents_are_valid_and_carry_every_key_class() {
        let classes = ClassSet::receipts();
        let docs = synth_generate(&SynthSpec::new(60, 1)).unwrap();
        for mut d in docs {
            let before = d.clone();
            d.validate(&classes).unwrap();
            assert_eq!(d, before, "generator produced an out-of-image box");
            let labels: HashSet<&str> = d.tokens.iter().filter_map(|t| t.label.as_deref()).collect();
            for c in &classes.names()[1..] {
                assert!(labels.contains(c.as_str()), "{} lacks {c}", d.id);
            }
            assert!(d.tokens.iter().all(|t| t.bbox.width() > 0.0 && t.bbox.height() > 0.0));
        }
    }

    #[test]
    fn centered_without_jitter_aligns_lines() {
        let spec = SynthSpec {
            style_weights: [0.0, 1.0, 0.0],
            jitter: 0.0,
            ..SynthSpec::new(5, 3)
        };
        for d in synth_generate(&spec).unwrap() {
            // The amount on the total line shares y_top with its keyword.
            let total = d
                .tokens
                .iter()
                .position(|t| t.label.as_deref() == Some("ExpenseAmount"))
                .unwrap();
            assert_eq!(d.tokens[total].bbox.y_top, d.tokens[total - 1].bbox.y_top);
        }
    }

    #[test]
    fn field_presence_zero_drops_key_fields() {
        let spec = SynthSpec {
            field_presence: 0.0,
            ..SynthSpec::new(5, 3)
        };
        for d in synth_generate(&spec).unwrap() {
            assert!(d.tokens.iter().all(|t| t.label.as_deref() == Some("DontCare")));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synth_generate(&SynthSpec::new(0, 1)).is_err());
        let spec = SynthSpec {
            style_weights: [0.5, 0.5, 0.5],
            ..SynthSpec::new(3, 1)
        };
        assert!(synth_generate(&spec).is_err());
    }
}
