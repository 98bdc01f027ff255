//! Per-token color encodings for the scatter views.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{Modality, Role, TokenRecord};

pub const DISCRETE_POSITIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorScheme {
    TokenType,
    Norm,
    PositionNormalized,
    PositionDiscrete,
    ImageRow,
    ImageCol,
    PatchRgb,
}

impl ColorScheme {
    pub const ALL: [ColorScheme; 7] = [
        ColorScheme::TokenType,
        ColorScheme::Norm,
        ColorScheme::PositionNormalized,
        ColorScheme::PositionDiscrete,
        ColorScheme::ImageRow,
        ColorScheme::ImageCol,
        ColorScheme::PatchRgb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ColorScheme::TokenType => "token_type",
            ColorScheme::Norm => "norm",
            ColorScheme::PositionNormalized => "position_normalized",
            ColorScheme::PositionDiscrete => "position_discrete",
            ColorScheme::ImageRow => "image_row",
            ColorScheme::ImageCol => "image_col",
            ColorScheme::PatchRgb => "patch_rgb",
        }
    }

    pub fn for_modality(modality: Modality) -> Vec<ColorScheme> {
        match modality {
            Modality::Text => vec![
                ColorScheme::TokenType,
                ColorScheme::Norm,
                ColorScheme::PositionNormalized,
                ColorScheme::PositionDiscrete,
            ],
            Modality::Image => vec![
                ColorScheme::TokenType,
                ColorScheme::Norm,
                ColorScheme::ImageRow,
                ColorScheme::ImageCol,
                ColorScheme::PatchRgb,
            ],
        }
    }
}

impl fmt::Display for ColorScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ColorScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        ColorScheme::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown color scheme {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum ColorValues {
    /// Category indices; `None` for tokens the scheme does not cover (e.g. CLS rows).
    Category(Vec<Option<u32>>),
    Scalar(Vec<f64>),
    Rgb(Vec<Option<[u8; 3]>>),
}

impl ColorValues {
    pub fn len(&self) -> usize {
        match self {
            ColorValues::Category(v) => v.len(),
            ColorValues::Scalar(v) => v.len(),
            ColorValues::Rgb(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> ColorValues {
        match self {
            ColorValues::Category(v) => ColorValues::Category(idx.iter().map(|&i| v[i]).collect()),
            ColorValues::Scalar(v) => ColorValues::Scalar(idx.iter().map(|&i| v[i]).collect()),
            ColorValues::Rgb(v) => ColorValues::Rgb(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorEncoding {
    pub scheme: ColorScheme,
    pub values: ColorValues,
    /// Parallel to `values`; set for queries, which are drawn in darker hues.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dark: Option<Vec<bool>>,
}

/// Every scheme applicable to `modality`, in token order.
///
/// Sequence lengths are counted from the query tokens of each sequence.
pub fn encode_colors(tokens: &[TokenRecord], modality: Modality) -> Vec<ColorEncoding> {
    let mut lengths: BTreeMap<u32, usize> = BTreeMap::new();
    for t in tokens.iter().filter(|t| t.role == Role::Query) {
        *lengths.entry(t.sequence_id).or_default() += 1;
    }
    ColorScheme::for_modality(modality)
        .into_iter()
        .map(|scheme| {
            let mut dark = None;
            let values = match scheme {
                ColorScheme::TokenType => ColorValues::Category(
                    tokens.iter().map(|t| Some(if t.role == Role::Query { 0 } else { 1 })).collect(),
                ),
                ColorScheme::Norm => ColorValues::Scalar(tokens.iter().map(|t| t.norm_prescale).collect()),
                ColorScheme::PositionNormalized => ColorValues::Scalar(
                    tokens
                        .iter()
                        .map(|t| {
                            let len = lengths.get(&t.sequence_id).copied().unwrap_or(0).max(t.position + 1);
                            t.position as f64 / len as f64
                        })
                        .collect(),
                ),
                ColorScheme::PositionDiscrete => {
                    dark = Some(tokens.iter().map(|t| t.role == Role::Query).collect());
                    ColorValues::Category(
                        tokens.iter().map(|t| Some((t.position % DISCRETE_POSITIONS) as u32)).collect(),
                    )
                }
                ColorScheme::ImageRow => ColorValues::Category(tokens.iter().map(|t| t.row).collect()),
                ColorScheme::ImageCol => ColorValues::Category(tokens.iter().map(|t| t.col).collect()),
                ColorScheme::PatchRgb => ColorValues::Rgb(tokens.iter().map(|t| t.patch_rgb).collect()),
            };
            ColorEncoding { scheme, values, dark }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn scheme(enc: &[ColorEncoding], s: ColorScheme) -> &ColorEncoding {
        enc.iter().find(|e| e.scheme == s).unwrap()
    }

    #[test]
    fn first_and_sixth_tokens_share_discrete_color() {
        let tokens = synthetic::text_tokens(&[8], false);
        let enc = encode_colors(&tokens, Modality::Text);
        let ColorValues::Category(v) = &scheme(&enc, ColorScheme::PositionDiscrete).values else { panic!() };
        assert_eq!(v[1], Some(1));
        assert_eq!(v[6], Some(1));
        assert!(v.iter().all(|c| c.unwrap() < 5));
        let dark = scheme(&enc, ColorScheme::PositionDiscrete).dark.as_ref().unwrap();
        assert!(dark[..8].iter().all(|&d| d));
        assert!(dark[8..].iter().all(|&d| !d));
    }

    #[test]
    fn last_token_normalized_position() {
        let tokens = synthetic::text_tokens(&[3, 7], false);
        let enc = encode_colors(&tokens, Modality::Text);
        let ColorValues::Scalar(v) = &scheme(&enc, ColorScheme::PositionNormalized).values else { panic!() };
        assert_eq!(v[9], 6.0 / 7.0);
        assert_eq!(v[2], 2.0 / 3.0);
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn image_rows_pass_through() {
        let tokens = synthetic::image_tokens(1, 5);
        let enc = encode_colors(&tokens, Modality::Image);
        let ColorValues::Category(rows) = &scheme(&enc, ColorScheme::ImageRow).values else { panic!() };
        let idx = tokens.iter().position(|t| t.row == Some(3)).unwrap();
        assert_eq!(rows[idx], Some(3));
        assert_eq!(rows[0], None);
        assert!(enc.iter().all(|e| e.scheme != ColorScheme::PositionDiscrete));
    }

    #[test]
    fn tagged_json_layout() {
        let enc = ColorEncoding { scheme: ColorScheme::Norm, values: ColorValues::Scalar(vec![1.5]), dark: None };
        assert_eq!(
            serde_json::to_value(&enc).unwrap(),
            serde_json::json!({"scheme": "norm", "values": {"kind": "scalar", "values": [1.5]}})
        );
    }
}
