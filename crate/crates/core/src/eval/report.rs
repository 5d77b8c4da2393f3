use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Result;

pub const REPORT_CSV_HEADER: &str = "variant,mse,psnr_db,probe_acc,seed";

/// JSON has no infinity; a perfect reconstruction's PSNR is written as the
/// string `"inf"`.
mod psnr_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value `{t}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub mse: f64,
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub probe_acc: Option<f64>,
    pub n_eval: usize,
    pub seed: u64,
}

impl EvalRow {
    /// Whether the stored PSNR is the one implied by the stored MSE.
    pub fn psnr_consistent(&self) -> bool {
        let want = super::psnr_db(self.mse);
        if want.is_infinite() {
            return self.psnr_db == want;
        }
        (self.psnr_db - want).abs() <= 1e-9 * want.abs().max(1.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let acc = r.probe_acc.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.variant, r.mse, r.psnr_db, acc, r.seed));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        Ok(())
    }
}
