use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ImagePair;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Instruction sent with every annotation request.
pub const ANNOTATION_PROMPT: &str =
    "Briefly describe each image independently, then explain the changes happening between them.";

/// Placeholder the vision-language model replaces with frame features.
pub const VIDEO_TOKEN: &str = "<video>";

const REQUEST_FORMAT: &str = "peft-forge/annotation-requests";
const RESPONSE_FORMAT: &str = "peft-forge/annotation-responses";
const FILE_VERSION: u32 = 1;

const TEMPLATES: &str = include_str!("../../data/templates.txt");

/// The shipped human-prompt paraphrases, one per line of
/// `data/templates.txt`.
pub fn default_templates() -> Vec<String> {
    TEMPLATES
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub correlation_id: String,
    pub pair_id: String,
    pub first_image: String,
    pub second_image: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestFile {
    pub format: String,
    pub version: u32,
    pub requests: Vec<AnnotationRequest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub correlation_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseFile {
    pub format: String,
    pub version: u32,
    pub responses: Vec<AnnotationResponse>,
}

macro_rules! json_file {
    ($ty:ty, $tag:expr, $items:ident, $item:ty) => {
        impl $ty {
            pub fn new($items: Vec<$item>) -> Self {
                Self {
                    format: $tag.to_string(),
                    version: FILE_VERSION,
                    $items,
                }
            }

            pub fn to_json(&self) -> String {
                serde_json::to_string_pretty(self).expect("serializes") + "\n"
            }

            pub fn from_json(text: &str) -> Result<Self> {
                let f: Self = serde_json::from_str(text).map_err(|e| Error::format(format!("{}: {e}", $tag)))?;
                if f.format != $tag || f.version != FILE_VERSION {
                    return Err(Error::format(format!(
                        "expected {} version {}, found {} version {}",
                        $tag, FILE_VERSION, f.format, f.version
                    )));
                }
                Ok(f)
            }
        }
    };
}

json_file!(RequestFile, REQUEST_FORMAT, requests, AnnotationRequest);
json_file!(ResponseFile, RESPONSE_FORMAT, responses, AnnotationResponse);

/// One request per pair, with correlation ids `req-000000`, `req-000001`, ...
pub fn build_annotation_requests(pairs: &[ImagePair]) -> RequestFile {
    RequestFile::new(
        pairs
            .iter()
            .enumerate()
            .map(|(i, p)| AnnotationRequest {
                correlation_id: format!("req-{i:06}"),
                pair_id: p.id(),
                first_image: p.first.image_id.clone(),
                second_image: p.second.image_id.clone(),
                prompt: ANNOTATION_PROMPT.to_string(),
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JoinReport {
    /// Pair id to annotation text.
    pub annotations: BTreeMap<String, String>,
    /// Response ids that match no request.
    pub unmatched: Vec<String>,
    /// Request ids without a response.
    pub unanswered: Vec<String>,
}

pub fn ingest_annotation_responses(requests: &RequestFile, responses: &ResponseFile) -> Result<JoinReport> {
    let by_id: HashMap<&str, &AnnotationRequest> = requests
        .requests
        .iter()
        .map(|r| (r.correlation_id.as_str(), r))
        .collect();
    let mut seen = HashSet::new();
    let mut out = JoinReport::default();
    for resp in &responses.responses {
        if !seen.insert(resp.correlation_id.as_str()) {
            return Err(Error::consistency(format!(
                "duplicate response for {}",
                resp.correlation_id
            )));
        }
        match by_id.get(resp.correlation_id.as_str()) {
            Some(req) => {
                out.annotations.insert(req.pair_id.clone(), resp.text.clone());
            }
            None => out.unmatched.push(resp.correlation_id.clone()),
        }
    }
    out.unanswered = requests
        .requests
        .iter()
        .filter(|r| !seen.contains(r.correlation_id.as_str()))
        .map(|r| r.correlation_id.clone())
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Gpt,
}

/// Serialized with the `from`/`value` keys of the LLaVA conversation format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "from")]
    pub speaker: Speaker,
    #[serde(rename = "value")]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub video: String,
    pub conversations: Vec<Turn>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::consistency(format!("record {}: {why}", self.id)));
        if self.conversations.is_empty() {
            return bad("no turns");
        }
        for (i, t) in self.conversations.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Human } else { Speaker::Gpt };
            if t.speaker != expected {
                return bad("turns must alternate starting with human");
            }
        }
        if self.conversations[0].text.matches(VIDEO_TOKEN).count() != 1 {
            return bad("first human turn needs exactly one video token");
        }
        Ok(())
    }

    /// Whitespace-separated words over all turns, a stand-in for the
    /// model tokenizer's length.
    pub fn word_count(&self) -> usize {
        self.conversations
            .iter()
            .map(|t| t.text.split_whitespace().count())
            .sum()
    }
}

/// Records as one pretty-printed JSON array.
pub fn serialize_annotations(records: &[AnnotationRecord]) -> String {
    serde_json::to_string_pretty(records).expect("serializes") + "\n"
}

/// Parses and validates a record array; ids must be unique.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let records: Vec<AnnotationRecord> =
        serde_json::from_str(text).map_err(|e| Error::format(format!("annotations: {e}")))?;
    let mut ids = HashSet::new();
    for r in &records {
        r.validate()?;
        if !ids.insert(r.id.as_str()) {
            return Err(Error::consistency(format!("duplicate record id {}", r.id)));
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitOutput {
    pub records: Vec<AnnotationRecord>,
    /// Ids of records whose word count exceeds the length limit.
    pub over_length: Vec<String>,
}

/// Builds one two-turn record per pair. The human turn is a template drawn
/// with a generator seeded by `seed`, followed by a newline and the video
/// token; the reply is the pair's annotation text.
pub fn emit_annotations(
    pairs: &[ImagePair],
    annotations: &BTreeMap<String, String>,
    templates: &[String],
    seed: u64,
    max_length: usize,
) -> Result<EmitOutput> {
    if templates.is_empty() {
        return Err(Error::param("at least one prompt template is required"));
    }
    if let Some(t) = templates.iter().find(|t| t.contains(VIDEO_TOKEN)) {
        return Err(Error::param(format!(
            "template already contains the video token: {t:?}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut out = EmitOutput {
        records: Vec::with_capacity(pairs.len()),
        over_length: Vec::new(),
    };
    for p in pairs {
        let id = p.id();
        let reply = annotations
            .get(&id)
            .ok_or_else(|| Error::consistency(format!("pair {id} has no annotation")))?;
        let template = &templates[rng.index(templates.len())];
        let rec = AnnotationRecord {
            id: id.clone(),
            video: p.video_name(),
            conversations: vec![
                Turn {
                    speaker: Speaker::Human,
                    text: format!("{template}\n{VIDEO_TOKEN}"),
                },
                Turn {
                    speaker: Speaker::Gpt,
                    text: reply.clone(),
                },
            ],
        };
        if rec.word_count() > max_length {
            out.over_length.push(id);
        }
        out.records.push(rec);
    }
    Ok(out)
}

/// Frames that make up each pair's video, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameManifestEntry {
    pub video: String,
    pub frames: Vec<String>,
}

pub fn frame_manifest(pairs: &[ImagePair]) -> Vec<FrameManifestEntry> {
    pairs
        .iter()
        .map(|p| FrameManifestEntry {
            video: p.video_name(),
            frames: vec![p.first.image_id.clone(), p.second.image_id.clone()],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::MetadataRecord;
    use chrono::NaiveDate;

    fn pair(i: usize) -> ImagePair {
        let rec = |suffix: &str, y: i32| MetadataRecord {
            image_id: format!("img{i}{suffix}"),
            location_id: format!("loc{i}"),
            timestamp: NaiveDate::from_ymd_opt(y, 6, 1).unwrap(),
            byte_size: 10,
            category: "farm".into(),
            width: 5,
            height: 5,
        };
        ImagePair {
            first: rec("a", 2010),
            second: rec("b", 2012),
            gap_months: 24,
        }
    }

    #[test]
    fn shipped_templates_are_pinned() {
        assert_eq!(
            default_templates(),
            vec![
                "Describe what each frame of this video shows, then summarize how the scene changed.",
                "What is visible in the two frames, and what changed between them?",
                "Give a short description of both images in the video and explain the differences.",
                "Look at the first and the last frame. Describe each one and list the changes over time.",
                "Summarize the content of each frame and describe how the location evolved.",
            ]
        );
    }

    #[test]
    fn requests_carry_prompt_and_unique_ids() {
        let ps: Vec<_> = (0..3).map(pair).collect();
        let file = build_annotation_requests(&ps);
        assert!(file.requests.iter().all(|r| r.prompt.contains(ANNOTATION_PROMPT)));
        let ids: HashSet<_> = file.requests.iter().map(|r| &r.correlation_id).collect();
        assert_eq!(ids.len(), 3);
        let empty = build_annotation_requests(&[]);
        assert_eq!(RequestFile::from_json(&empty.to_json()).unwrap(), empty);
        assert!(empty.to_json().contains(REQUEST_FORMAT));
    }

    #[test]
    fn response_join() {
        let ps: Vec<_> = (0..3).map(pair).collect();
        let reqs = build_annotation_requests(&ps);
        let resp = |id: &str| AnnotationResponse {
            correlation_id: id.into(),
            text: format!("text for {id}"),
        };
        let all = ResponseFile::new(vec![resp("req-000000"), resp("req-000001"), resp("req-000002")]);
        assert_eq!(ingest_annotation_responses(&reqs, &all).unwrap().annotations.len(), 3);

        let partial = ResponseFile::new(vec![resp("req-000000"), resp("req-000002"), resp("req-999999")]);
        let j = ingest_annotation_responses(&reqs, &partial).unwrap();
        assert_eq!(j.annotations.len(), 2);
        assert_eq!(j.unanswered, vec!["req-000001"]);
        assert_eq!(j.unmatched, vec!["req-999999"]);

        let dup = ResponseFile::new(vec![resp("req-000000"), resp("req-000000")]);
        assert!(matches!(
            ingest_annotation_responses(&reqs, &dup),
            Err(Error::Consistency(_))
        ));
        assert!(ResponseFile::from_json(&RequestFile::new(vec![]).to_json()).is_err());
    }

    #[test]
    fn emitted_record_layout() {
        let p = pair(0);
        let notes = BTreeMap::from([(p.id(), "A field. Later, a road.".to_string())]);
        let templates = vec!["Describe the video.".to_string()];
        let out = emit_annotations(std::slice::from_ref(&p), &notes, &templates, 0, 400).unwrap();
        let rec = &out.records[0];
        rec.validate().unwrap();
        assert_eq!(rec.video, "img0a__img0b.mp4");
        assert_eq!(rec.conversations[0].text, "Describe the video.\n<video>");
        assert_eq!(rec.conversations[1].speaker, Speaker::Gpt);
        let json = serialize_annotations(&out.records);
        assert!(json.contains("\"from\": \"human\""));
        assert_eq!(parse_annotations(&json).unwrap(), out.records);
        assert!(out.over_length.is_empty());
        let short = emit_annotations(&[p], &notes, &templates, 0, 5).unwrap();
        assert_eq!(short.over_length.len(), 1);
    }

    #[test]
    fn template_choice_is_seeded() {
        let ps: Vec<_> = (0..20).map(pair).collect();
        let notes: BTreeMap<_, _> = ps.iter().map(|p| (p.id(), "x".to_string())).collect();
        let templates = vec!["first".to_string(), "second".to_string()];
        let a = emit_annotations(&ps, &notes, &templates, 7, 400).unwrap();
        let b = emit_annotations(&ps, &notes, &templates, 7, 400).unwrap();
        assert_eq!(a, b);
        let used: HashSet<_> = a.records.iter().map(|r| r.conversations[0].text.clone()).collect();
        assert_eq!(used.len(), 2);
    }

    #[test]
    fn missing_annotation_names_pair() {
        let err = emit_annotations(&[pair(4)], &BTreeMap::new(), &default_templates(), 0, 400).unwrap_err();
        assert!(matches!(err, Error::Consistency(m) if m.contains("img4a__img4b")));
    }

    #[test]
    fn invalid_records_rejected_on_parse() {
        let two_tokens = r#"[{"id":"x","video":"v.mp4","conversations":[{"from":"human","value":"<video> <video>"}]}]"#;
        assert!(matches!(parse_annotations(two_tokens), Err(Error::Consistency(_))));
        let gpt_first = r#"[{"id":"x","video":"v.mp4","conversations":[{"from":"gpt","value":"<video>"}]}]"#;
        assert!(parse_annotations(gpt_first).is_err());
        assert!(matches!(parse_annotations("[{]"), Err(Error::Format(_))));
    }

    #[test]
    fn frame_manifest_lists_both_images() {
        let m = frame_manifest(&[pair(1)]);
        assert_eq!(m[0].frames, vec!["img1a", "img1b"]);
    }
}
