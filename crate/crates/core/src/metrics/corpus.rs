use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bert_score, bleu, rouge_l, rouge_n, tokenize, BleuConfig, EmbeddingProvider, Prf};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub bleu: f64,
    pub bert: Prf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Arithmetic means over pairs. ROUGE columns use the F-measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    pub bert_p: f64,
    pub bert_r: f64,
    pub bert_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub bleu: BleuConfig,
    pub pairs: Vec<PairScores>,
    pub means: MeanScores,
}

fn score_pair(cand: &str, reference: &str, cfg: &BleuConfig, emb: &dyn EmbeddingProvider) -> Result<PairScores> {
    let c = tokenize(cand);
    let r = tokenize(reference);
    let mut notes = Vec::new();
    if c.is_empty() {
        notes.push("empty candidate".to_string());
    }
    if r.is_empty() {
        notes.push("empty reference".to_string());
    }
    Ok(PairScores {
        rouge1: rouge_n(&c, &r, 1)?,
        rouge2: rouge_n(&c, &r, 2)?,
        rouge_l: rouge_l(&c, &r),
        bleu: bleu(&c, &r, cfg)?,
        bert: bert_score(&c, &r, emb)?,
        notes,
    })
}

/// Mean of `values` summed in ascending order, so the result does not depend
/// on pair order or on how the work was split.
fn ordered_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Scores every `(candidate, reference)` pair in parallel and aggregates
/// the means. Per-pair entries keep the input order.
pub fn evaluate_corpus(
    label: &str,
    pairs: &[(String, String)],
    cfg: &BleuConfig,
    emb: &dyn EmbeddingProvider,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::param("cannot evaluate an empty corpus"));
    }
    cfg.validate()?;
    let scores = pairs
        .par_iter()
        .map(|(c, r)| score_pair(c, r, cfg, emb))
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&PairScores) -> f64| ordered_mean(scores.iter().map(f).collect());
    let means = MeanScores {
        rouge1: mean(|s| s.rouge1.f1),
        rouge2: mean(|s| s.rouge2.f1),
        rouge_l: mean(|s| s.rouge_l.f1),
        bleu: mean(|s| s.bleu),
        bert_p: mean(|s| s.bert.precision),
        bert_r: mean(|s| s.bert.recall),
        bert_f: mean(|s| s.bert.f1),
    };
    Ok(EvalReport {
        label: label.to_string(),
        bleu: cfg.clone(),
        pairs: scores,
        means,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(format!("eval report: {e}")))
    }

    /// Fixed-width summary row under a header, one line each.
    pub fn table(&self) -> String {
        let m = &self.means;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>8} {:>8} {:>8} {:>8} {:>10}",
            "Configuration", "ROUGE-1", "ROUGE-2", "ROUGE-L", "BLEU", "BERTScore"
        );
        let _ = writeln!(
            out,
            "{:<20} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>10.3}",
            self.label, m.rouge1, m.rouge2, m.rouge_l, m.bleu, m.bert_f
        );
        out
    }
}

fn unescape(field: &str, lineno: usize) -> Result<String> {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('\\') => out.push('\\'),
            other => {
                return Err(Error::format(format!(
                    "line {lineno}: bad escape \\{}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

fn escape(field: &str) -> String {
    field.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

/// Parses `candidate<TAB>reference` lines; `\t`, `\n` and `\\` are the only
/// escapes. Empty lines are skipped.
pub fn read_tsv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let cand = fields.next().unwrap_or_default();
        let reference = fields
            .next()
            .ok_or_else(|| Error::format(format!("line {lineno}: missing reference column")))?;
        if fields.next().is_some() {
            return Err(Error::format(format!("line {lineno}: more than two columns")));
        }
        pairs.push((unescape(cand, lineno)?, unescape(reference, lineno)?));
    }
    Ok(pairs)
}

pub fn write_tsv(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(c, r)| format!("{}\t{}\n", escape(c), escape(r)))
        .collect()
}

/// Pairs line `i` of the candidate file with line `i` of the reference file.
pub fn read_paired_files(candidates: &Path, references: &Path) -> Result<Vec<(String, String)>> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let c = read(candidates)?;
    let r = read(references)?;
    let cl: Vec<&str> = c.lines().collect();
    let rl: Vec<&str> = r.lines().collect();
    if cl.len() != rl.len() {
        let (line, missing) = if cl.len() > rl.len() {
            (rl.len() + 1, references)
        } else {
            (cl.len() + 1, candidates)
        };
        return Err(Error::format(format!("{}: line {line} missing", missing.display())));
    }
    Ok(cl
        .into_iter()
        .zip(rl)
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{HashProjection, OneHot};

    fn corpus() -> Vec<(String, String)> {
        vec![
            (
                "a new road crosses the field".into(),
                "a road was built across the field".into(),
            ),
            (
                "buildings appear".into(),
                "several buildings appear near the river".into(),
            ),
            ("".into(), "nothing".into()),
            ("the lake shrank".into(), "the lake shrank".into()),
        ]
    }

    #[test]
    fn identical_corpus_scores_one() {
        let pairs: Vec<(String, String)> = corpus().into_iter().map(|(_, r)| (r.clone(), r)).collect();
        let emb = HashProjection::new(8, 0).unwrap();
        let multi: Vec<_> = pairs.iter().filter(|(c, _)| c.contains(' ')).cloned().collect();
        let m = evaluate_corpus("id", &multi, &BleuConfig::default(), &emb)
            .unwrap()
            .means;
        for v in [m.rouge1, m.rouge2, m.rouge_l, m.bleu, m.bert_p, m.bert_r, m.bert_f] {
            assert_eq!(v, 1.0);
        }
        // a one-word sentence has no bigram, so its order-2 scores are 0
        let m = evaluate_corpus("id", &pairs, &BleuConfig::default(), &emb)
            .unwrap()
            .means;
        assert_eq!((m.rouge1, m.rouge2, m.bleu), (1.0, 0.75, 0.75));
    }

    #[test]
    fn single_pair_mean_is_the_pair() {
        let pairs = corpus()[..1].to_vec();
        let emb = HashProjection::new(8, 0).unwrap();
        let rep = evaluate_corpus("one", &pairs, &BleuConfig::default(), &emb).unwrap();
        assert_eq!(rep.means.bleu, rep.pairs[0].bleu);
        assert_eq!(rep.means.rouge_l, rep.pairs[0].rouge_l.f1);
        assert_eq!(rep.means.bert_f, rep.pairs[0].bert.f1);
    }

    #[test]
    fn permutation_keeps_means() {
        let pairs = corpus();
        let mut rev = pairs.clone();
        rev.reverse();
        let emb = OneHot::new(pairs.iter().flat_map(|(a, b)| {
            let mut t = tokenize(a).tokens().to_vec();
            t.extend(tokenize(b).tokens().iter().cloned());
            t
        }));
        let a = evaluate_corpus("x", &pairs, &BleuConfig::default(), &emb).unwrap();
        let b = evaluate_corpus("x", &rev, &BleuConfig::default(), &emb).unwrap();
        assert_eq!(a.means, b.means);
        assert_eq!(a.pairs[2].notes, vec!["empty candidate".to_string()]);
    }

    #[test]
    fn empty_corpus_rejected() {
        let emb = HashProjection::new(2, 0).unwrap();
        assert!(matches!(
            evaluate_corpus("e", &[], &BleuConfig::default(), &emb),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn report_json_roundtrip_and_table() {
        let emb = HashProjection::new(4, 0).unwrap();
        let rep = evaluate_corpus("LoRA", &corpus(), &BleuConfig::default(), &emb).unwrap();
        assert_eq!(EvalReport::from_json(&rep.to_json()).unwrap(), rep);
        let table = rep.table();
        assert!(table.starts_with("Configuration"));
        assert_eq!(table.lines().count(), 2);
        assert!(table.lines().nth(1).unwrap().starts_with("LoRA"));
    }

    #[test]
    fn tsv_escapes_roundtrip() {
        let pairs = vec![("tab\there".to_string(), "back\\slash\nnewline".to_string())];
        assert_eq!(read_tsv(&write_tsv(&pairs)).unwrap(), pairs);
        assert!(matches!(read_tsv("ok\tfine\nonly one column\n"), Err(Error::Format(m)) if m.contains("line 2")));
        assert!(read_tsv("bad \\q\tx\n").is_err());
    }

    #[test]
    fn paired_files_report_missing_line() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("c.txt");
        let r = dir.path().join("r.txt");
        std::fs::write(&c, "one\ntwo\nthree\n").unwrap();
        std::fs::write(&r, "uno\ndos\n").unwrap();
        let err = read_paired_files(&c, &r).unwrap_err();
        assert!(err.to_string().contains("line 3"));
        std::fs::write(&r, "uno\ndos\ntres\n").unwrap();
        assert_eq!(read_paired_files(&c, &r).unwrap().len(), 3);
    }
}
