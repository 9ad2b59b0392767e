//! Six-aspect colorization scores: deterministic proxies, an external judge
//! client, aggregation, and pairwise win rates.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use base64::Engine;
use regex::Regex;
use serde::Serialize;
use serde_json::{json, Value};

use crate::color_math::{colorfulness, gray_mae, Image8};
use crate::error::{Error, Result};
use crate::image_io::encode_png;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Aspect {
    Cri,
    Cra,
    Ccs,
    Scs,
    Aes,
    Oa,
}

impl Aspect {
    pub const ALL: [Aspect; 6] = [Aspect::Cri, Aspect::Cra, Aspect::Ccs, Aspect::Scs, Aspect::Aes, Aspect::Oa];

    pub fn code(self) -> &'static str {
        match self {
            Aspect::Cri => "CRI",
            Aspect::Cra => "CRA",
            Aspect::Ccs => "CCS",
            Aspect::Scs => "SCS",
            Aspect::Aes => "AES",
            Aspect::Oa => "OA",
        }
    }

    fn index(self) -> usize {
        Aspect::ALL.iter().position(|a| *a == self).expect("listed")
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    Proxy,
    External,
}

/// Scores in `[0, 100]`; aspects a source cannot judge are masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectScores {
    values: [f64; 6],
    valid: [bool; 6],
    pub source: ScoreSource,
}

impl AspectScores {
    pub fn new(source: ScoreSource, scores: &[(Aspect, f64)]) -> Result<Self> {
        let mut s = Self { values: [0.0; 6], valid: [false; 6], source };
        for &(a, v) in scores {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{a} score {v} outside [0, 100]")));
            }
            s.values[a.index()] = v;
            s.valid[a.index()] = true;
        }
        Ok(s)
    }

    pub fn get(&self, a: Aspect) -> Option<f64> {
        self.valid[a.index()].then(|| self.values[a.index()])
    }

    pub fn is_complete(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn to_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        m.insert("source".into(), json!(self.source));
        for a in Aspect::ALL {
            m.insert(a.code().into(), self.get(a).map_or(Value::Null, |v| json!(v)));
        }
        Value::Object(m)
    }
}

/// CRI from colorfulness, SCS from gray consistency; other aspects unscored.
pub fn proxy_scores(condition: &Image8, output: &Image8) -> Result<AspectScores> {
    if !condition.same_size(output) {
        return Err(Error::Shape(format!(
            "condition {}x{} vs output {}x{}",
            condition.width(),
            condition.height(),
            output.width(),
            output.height()
        )));
    }
    let cri = colorfulness(&output.to_rgb()).clamp(0.0, 100.0);
    let mae = gray_mae(&output.to_rgb(), &condition.to_rgb())?;
    let scs = 100.0 * (-mae / 20.0).exp();
    AspectScores::new(ScoreSource::Proxy, &[(Aspect::Cri, cri), (Aspect::Scs, scs)])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AspectSummary {
    pub aspect: Aspect,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateTable {
    pub source: ScoreSource,
    pub rows: Vec<AspectSummary>,
}

/// Per-aspect mean, spread and count over the records that score it.
pub fn aggregate(scores: &[AspectScores]) -> Result<AggregateTable> {
    let first = scores.first().ok_or_else(|| Error::InvalidArgument("no scores to aggregate".into()))?;
    if scores.iter().any(|s| s.source != first.source) {
        return Err(Error::InvalidArgument("cannot aggregate proxy and external scores together".into()));
    }
    let rows = Aspect::ALL
        .into_iter()
        .map(|a| {
            let vals: Vec<f64> = scores.iter().filter_map(|s| s.get(a)).collect();
            let n = vals.len();
            let (mean, std) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                (mean, var.sqrt())
            };
            AspectSummary { aspect: a, mean, std, count: n }
        })
        .collect();
    Ok(AggregateTable { source: first.source, rows })
}

impl AggregateTable {
    /// One JSON object per aspect.
    pub fn records(&self) -> Vec<Value> {
        self.rows
            .iter()
            .map(|r| {
                let num = |v: f64| if v.is_finite() { json!(v) } else { Value::Null };
                json!({ "source": self.source, "aspect": r.aspect.code(), "mean": num(r.mean), "std": num(r.std), "count": r.count })
            })
            .collect()
    }
}

impl fmt::Display for AggregateTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>10}{:>10}{:>8}", "aspect", "mean", "std", "n")?;
        for r in &self.rows {
            if r.count == 0 {
                writeln!(f, "{:<8}{:>10}{:>10}{:>8}", r.aspect.code(), "-", "-", 0)?;
            } else {
                writeln!(f, "{:<8}{:>10.3}{:>10.3}{:>8}", r.aspect.code(), r.mean, r.std, r.count)?;
            }
        }
        Ok(())
    }
}

/// One pairwise preference judgement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ballot {
    pub item: String,
    pub method_a: String,
    pub method_b: String,
    pub winner: String,
}

impl Ballot {
    pub fn new(item: &str, method_a: &str, method_b: &str, winner: &str) -> Result<Self> {
        let winner = match winner {
            "a" => method_a,
            "b" => method_b,
            w if w == method_a || w == method_b => w,
            w => return Err(Error::InvalidArgument(format!("winner {w:?} is neither {method_a:?} nor {method_b:?}"))),
        };
        Ok(Self { item: item.into(), method_a: method_a.into(), method_b: method_b.into(), winner: winner.into() })
    }

    pub fn involves(&self, method: &str) -> bool {
        self.method_a == method || self.method_b == method
    }
}

/// Tab-separated `item, method_a, method_b, winner`; the winner may be a
/// method name or `a`/`b`. Blank lines and `#` comments are skipped.
pub fn read_ballots(path: &Path) -> Result<Vec<Ballot>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Manifest { path: path.to_path_buf(), line: i + 1, msg };
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        out.push(Ballot::new(fields[0], fields[1], fields[2], fields[3]).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_ballots(path: &Path, ballots: &[Ballot]) -> Result<()> {
    let mut s = String::new();
    for b in ballots {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", b.item, b.method_a, b.method_b, b.winner));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Wins of `method` over the ballots it appears in.
pub fn win_rate(ballots: &[Ballot], method: &str) -> Result<f64> {
    let involved: Vec<&Ballot> = ballots.iter().filter(|b| b.involves(method)).collect();
    if involved.is_empty() {
        return Err(Error::InvalidArgument(format!("no ballots involve {method:?}")));
    }
    let wins = involved.iter().filter(|b| b.winner == method).count();
    Ok(wins as f64 / involved.len() as f64)
}

/// Win rate of `method` restricted to ballots against `opponent`.
pub fn win_rate_against(ballots: &[Ballot], method: &str, opponent: &str) -> Result<f64> {
    let subset: Vec<Ballot> = ballots.iter().filter(|b| b.involves(method) && b.involves(opponent)).cloned().collect();
    win_rate(&subset, method)
}

/// Every method that appears in `ballots`, in first-seen order.
pub fn methods(ballots: &[Ballot]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for b in ballots {
        for m in [&b.method_a, &b.method_b] {
            if !seen.contains(m) {
                seen.push(m.clone());
            }
        }
    }
    seen
}

pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/judge_template.txt");
pub const DEFAULT_TOKEN_ENV: &str = "FLOWTINT_JUDGE_TOKEN";

/// Judge prompt; must mention every aspect code.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeTemplate(String);

impl JudgeTemplate {
    pub fn new(text: &str) -> Result<Self> {
        if let Some(a) = Aspect::ALL.into_iter().find(|a| !text.contains(a.code())) {
            return Err(Error::Config(format!("judge template never mentions {a}")));
        }
        Ok(Self(text.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(&fs::read_to_string(path)?)
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl Default for JudgeTemplate {
    fn default() -> Self {
        Self(DEFAULT_TEMPLATE.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub token_env: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
    pub max_backoff: Duration,
    pub concurrency: usize,
    /// Send the grayscale input alongside the output.
    pub send_condition: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "judge".into(),
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(8),
            concurrency: 4,
            send_condition: true,
        }
    }
}

impl EndpointConfig {
    fn delay(&self, attempt: u32) -> Duration {
        let d = self.backoff.saturating_mul(1 << attempt.saturating_sub(1).min(16));
        d.min(self.max_backoff)
    }
}

/// Line-delimited request/response records, shared across workers.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl AuditLog {
    pub fn new(path: &Path) -> Self {
        Self { path: path.to_path_buf(), lock: Mutex::new(()) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&self, rec: &Value) -> Result<()> {
        let _g = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{rec}")?;
        Ok(())
    }
}

fn score_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(CRI|CRA|CCS|SCS|AES|OA)\b[^0-9\n]{0,12}?(\d+(?:\.\d+)?)").expect("valid regex"))
}

/// Extracts the six named scores from free-form judge text. The first
/// occurrence of each aspect wins.
pub fn parse_reply(text: &str) -> Result<AspectScores> {
    let mut found: [Option<f64>; 6] = [None; 6];
    for cap in score_regex().captures_iter(text) {
        let code = cap[1].to_ascii_uppercase();
        let a = Aspect::ALL.into_iter().find(|a| a.code() == code).expect("regex alternatives");
        let slot = &mut found[a.index()];
        if slot.is_none() {
            let v: f64 = cap[2].parse().map_err(|_| Error::Parse(format!("{a}: bad number {:?}", &cap[2])))?;
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Parse(format!("{a} score {v} outside [0, 100]")));
            }
            *slot = Some(v);
        }
    }
    let mut pairs = Vec::with_capacity(6);
    for a in Aspect::ALL {
        match found[a.index()] {
            Some(v) => pairs.push((a, v)),
            None => return Err(Error::Parse(format!("reply has no {a} score"))),
        }
    }
    AspectScores::new(ScoreSource::External, &pairs)
}

fn data_url(img: &Image8) -> Result<String> {
    let png = encode_png(img)?;
    Ok(format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png)))
}

fn request_body(cfg: &EndpointConfig, template: &JudgeTemplate, output: &Image8, condition: Option<&Image8>) -> Result<Value> {
    let mut content = vec![json!({ "type": "text", "text": template.text() })];
    content.push(json!({ "type": "image_url", "image_url": { "url": data_url(output)? } }));
    if let Some(c) = condition.filter(|_| cfg.send_condition) {
        content.push(json!({ "type": "text", "text": "Grayscale input:" }));
        content.push(json!({ "type": "image_url", "image_url": { "url": data_url(c)? } }));
    }
    Ok(json!({
        "model": cfg.model,
        "temperature": 0,
        "messages": [{ "role": "user", "content": content }],
    }))
}

/// A parsed judge reply and how many attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScore {
    pub scores: AspectScores,
    pub attempts: u32,
}

/// Blocking chat-completions client for the six-aspect judge.
#[derive(Debug, Clone)]
pub struct JudgeClient {
    cfg: EndpointConfig,
    template: JudgeTemplate,
    http: reqwest::blocking::Client,
    token: Option<String>,
}

impl JudgeClient {
    pub fn new(cfg: EndpointConfig, template: JudgeTemplate) -> Result<Self> {
        if cfg.concurrency == 0 {
            return Err(Error::Config("judge concurrency must be at least 1".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::Transport { attempts: 0, msg: e.to_string() })?;
        let token = std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty());
        Ok(Self { cfg, template, http, token })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    /// Scores one output. Transport failures, 429 and 5xx replies are
    /// retried with exponential backoff; an unparseable reply is not.
    pub fn score(&self, item: &str, output: &Image8, condition: Option<&Image8>, audit: Option<&AuditLog>) -> Result<ExternalScore> {
        let body = request_body(&self.cfg, &self.template, output, condition)?;
        let total = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=total {
            if attempt > 1 {
                std::thread::sleep(self.cfg.delay(attempt - 1));
            }
            let mut req = self.http.post(self.url()).json(&body);
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            let (status, text) = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    (Some(status), resp.text().unwrap_or_default())
                }
                Err(e) => (None, e.to_string()),
            };
            if let Some(a) = audit {
                a.append(&json!({
                    "item": item,
                    "attempt": attempt,
                    "request": body,
                    "status": status.map(|s| s.as_u16()),
                    "response": text,
                }))?;
            }
            match status {
                Some(s) if s.is_success() => {
                    if attempt > 1 {
                        log::info!("judge: {item} succeeded after {} retries", attempt - 1);
                    }
                    let scores = extract_content(&text).and_then(|c| parse_reply(&c)).map_err(|e| {
                        Error::Parse(format!("{item}: {e}; raw reply: {text}"))
                    })?;
                    return Ok(ExternalScore { scores, attempts: attempt });
                }
                Some(s) if !(s.is_server_error() || s.as_u16() == 429) => {
                    return Err(Error::Transport { attempts: attempt, msg: format!("{item}: HTTP {s}: {text}") });
                }
                Some(s) => last = format!("HTTP {s}"),
                None => last = text,
            }
            log::warn!("judge: {item} attempt {attempt}/{total} failed: {last}");
        }
        Err(Error::Transport { attempts: total, msg: format!("{item}: {last}") })
    }

    /// Scores many items with at most `concurrency` requests in flight;
    /// results come back in input order.
    pub fn score_all(&self, items: &[(String, Image8, Option<Image8>)], audit: Option<&AuditLog>) -> Vec<Result<ExternalScore>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<ExternalScore>>>> = items.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.cfg.concurrency.min(items.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((id, out, cond)) = items.get(i) else { break };
                    let r = self.score(id, out, cond.as_ref(), audit);
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot filled"))
            .collect()
    }
}

fn extract_content(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| Error::Parse(format!("response is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Parse("response has no choices[0].message.content".into()))
}

impl FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proxy" => Ok(ScoreSource::Proxy),
            "external" => Ok(ScoreSource::External),
            _ => Err(Error::InvalidArgument(format!("unknown score mode {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color_math::rgb_to_gray;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn img(seed: u32) -> Image8 {
        let data = (0..16 * 16 * 3).map(|i| ((i as u32).wrapping_mul(2654435761u32.wrapping_add(seed)) >> 24) as u8).collect();
        Image8::new(16, 16, 3, data).unwrap()
    }

    #[test]
    fn proxy_examples() {
        let out = img(1);
        let cond = rgb_to_gray(&out);
        let s = proxy_scores(&cond, &out).unwrap();
        assert_eq!(s.get(Aspect::Scs), Some(100.0));
        assert_eq!(s.get(Aspect::Aes), None);
        assert!(!s.is_complete());
        let gray_out = Image8::filled(16, 16, [90, 90, 90]);
        assert_eq!(proxy_scores(&cond, &gray_out).unwrap().get(Aspect::Cri), Some(0.0));
        assert!(proxy_scores(&cond, &Image8::filled(8, 8, [0, 0, 0])).is_err());

        let other = img(2);
        let mae = gray_mae(&other, &cond.to_rgb()).unwrap();
        let s = proxy_scores(&cond, &other).unwrap();
        assert_eq!(s.get(Aspect::Scs), Some(100.0 * (-mae / 20.0).exp()));
        assert_eq!(s.get(Aspect::Cri), Some(colorfulness(&other).clamp(0.0, 100.0)));
    }

    #[test]
    fn aggregate_examples() {
        let a = AspectScores::new(ScoreSource::External, &Aspect::ALL.map(|a| (a, 80.0))).unwrap();
        let b = AspectScores::new(ScoreSource::External, &Aspect::ALL.map(|a| (a, 60.0))).unwrap();
        let t = aggregate(std::slice::from_ref(&a)).unwrap();
        assert!(t.rows.iter().all(|r| r.mean == 80.0 && r.std == 0.0 && r.count == 1));
        let t = aggregate(&[a.clone(), b]).unwrap();
        assert!(t.rows.iter().all(|r| r.mean == 70.0 && r.std == 10.0));
        assert!(aggregate(&[]).is_err());
        let p = proxy_scores(&rgb_to_gray(&img(3)), &img(3)).unwrap();
        assert!(aggregate(&[a, p.clone()]).is_err());
        let t = aggregate(&[p]).unwrap();
        assert_eq!(t.rows.iter().filter(|r| r.count == 1).count(), 2);
        let text = t.to_string();
        for a in Aspect::ALL {
            assert!(text.contains(a.code()));
        }
        assert_eq!(t.records().len(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn aggregate_is_permutation_invariant(vals in proptest::collection::vec(0.0f64..100.0, 1..20), rot in 0usize..20) {
            let recs: Vec<AspectScores> = vals.iter().map(|&v| AspectScores::new(ScoreSource::External, &Aspect::ALL.map(|a| (a, v))).unwrap()).collect();
            let mut shuffled = recs.clone();
            shuffled.rotate_left(rot % recs.len());
            shuffled.reverse();
            let (x, y) = (aggregate(&recs).unwrap(), aggregate(&shuffled).unwrap());
            for (r, s) in x.rows.iter().zip(&y.rows) {
                prop_assert!((r.mean - s.mean).abs() < 1e-9 && (r.std - s.std).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ballots_and_win_rates() {
        let ten: Vec<Ballot> = (0..10).map(|i| Ballot::new(&i.to_string(), "ours", "ddcolor", "a").unwrap()).collect();
        assert_eq!(win_rate(&ten, "ours").unwrap(), 1.0);
        assert_eq!(win_rate(&ten, "ddcolor").unwrap(), 0.0);
        let four = vec![
            Ballot::new("1", "ours", "x", "ours").unwrap(),
            Ballot::new("2", "x", "ours", "b").unwrap(),
            Ballot::new("3", "ours", "x", "x").unwrap(),
            Ballot::new("4", "x", "ours", "ours").unwrap(),
        ];
        assert_eq!(win_rate(&four, "ours").unwrap(), 0.75);
        assert_eq!(win_rate(&four, "ours").unwrap() + win_rate(&four, "x").unwrap(), 1.0);
        assert!(win_rate(&four, "nobody").is_err());
        assert!(Ballot::new("1", "a1", "b1", "c1").is_err());
        assert_eq!(methods(&four), vec!["ours".to_string(), "x".to_string()]);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ballots.tsv");
        write_ballots(&p, &four).unwrap();
        assert_eq!(read_ballots(&p).unwrap(), four);
        fs::write(&p, "1\tours\tx\n").unwrap();
        assert!(matches!(read_ballots(&p), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn reply_parsing() {
        let s = parse_reply("CRI: 81\nCRA: 70\nCCS: 66\nSCS: 90\nAES: 75\nOA: 77").unwrap();
        assert_eq!(s.get(Aspect::Cri), Some(81.0));
        assert_eq!(s.get(Aspect::Oa), Some(77.0));
        assert!(s.is_complete());
        let loose = parse_reply("**cri** = 50, cra 51; CCS - 52. SCS: 53/100 AES:54 OA: 55").unwrap();
        assert_eq!(loose.get(Aspect::Ccs), Some(52.0));
        match parse_reply("CRI: 81\nCRA: 70\nCCS: 66\nAES: 75\nOA: 77") {
            Err(Error::Parse(m)) => assert!(m.contains("SCS"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(parse_reply("CRI: 181\nCRA: 70\nCCS: 66\nSCS: 1\nAES: 75\nOA: 77").is_err());
    }

    #[test]
    fn template_checks_aspects() {
        JudgeTemplate::new(DEFAULT_TEMPLATE).unwrap();
        assert!(JudgeTemplate::new("rate CRI CRA CCS SCS AES").is_err());
    }

    #[test]
    fn backoff_is_bounded() {
        let cfg = EndpointConfig { backoff: Duration::from_millis(100), max_backoff: Duration::from_millis(350), ..Default::default() };
        assert_eq!(cfg.delay(1), Duration::from_millis(100));
        assert_eq!(cfg.delay(2), Duration::from_millis(200));
        assert_eq!(cfg.delay(3), Duration::from_millis(350));
        assert_eq!(cfg.delay(40), Duration::from_millis(350));
    }
}
