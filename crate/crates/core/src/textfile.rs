// Header/body layout shared by policy and defense files:
//
//   id: <id>
//   version: <semver>
//   ---
//   one line per rule or instruction

use std::collections::BTreeMap;

pub(crate) struct HeaderedText {
    pub headers: BTreeMap<String, String>,
    pub lines: Vec<String>,
    pub has_separator: bool,
}

pub(crate) fn split(text: &str) -> Result<HeaderedText, String> {
    let mut headers = BTreeMap::new();
    let all: Vec<&str> = text.lines().collect();
    let sep = all.iter().position(|l| l.trim_end() == "---");

    let body: &[&str] = match sep {
        Some(idx) => {
            for (n, line) in all[..idx].iter().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line
                    .split_once(':')
                    .ok_or_else(|| format!("line {}: expected `key: value` header", n + 1))?;
                let key = key.trim().to_owned();
                if headers.insert(key.clone(), value.trim().to_owned()).is_some() {
                    return Err(format!("line {}: duplicate header `{key}`", n + 1));
                }
            }
            &all[idx + 1..]
        }
        None => &all[..],
    };

    let lines = body
        .iter()
        .map(|l| l.trim_end_matches(['\r', ' ', '\t']).to_owned())
        .filter(|l| !l.trim().is_empty())
        .collect();

    Ok(HeaderedText {
        headers,
        lines,
        has_separator: sep.is_some(),
    })
}

pub(crate) fn join(headers: &[(&str, &str)], lines: &[String]) -> String {
    let mut out = String::new();
    for (k, v) in headers {
        out.push_str(k);
        out.push_str(": ");
        out.push_str(v);
        out.push('\n');
    }
    out.push_str("---\n");
    for line in lines {
        out.push_str(line);
        out.push('\n');
    }
    out
}
