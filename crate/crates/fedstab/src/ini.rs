//! Minimal INI reader: `[section]` headers, `key = value` pairs, `#`/`;`
//! comment lines. Keys are case-sensitive; duplicates are rejected.

use std::collections::BTreeMap;

use fedstab_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IniDoc {
    pub sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl IniDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = IniDoc::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| Error::Parse { line: line_no, msg: format!("malformed section header `{line}`") })?;
                if doc.sections.contains_key(name) {
                    return Err(Error::Parse { line: line_no, msg: format!("duplicate section [{name}]") });
                }
                doc.sections.insert(name.to_string(), BTreeMap::new());
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: line_no, msg: format!("expected `key = value`, found `{line}`") })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse { line: line_no, msg: "empty key".into() });
            }
            let section = current
                .as_ref()
                .ok_or_else(|| Error::Parse { line: line_no, msg: format!("key `{key}` appears before any section") })?;
            let map = doc.sections.get_mut(section).expect("section was inserted");
            if map.contains_key(key) {
                return Err(Error::Parse { line: line_no, msg: format!("duplicate key `{key}` in [{section}]") });
            }
            map.insert(key.to_string(), Entry { value: value.trim().to_string(), line: line_no });
        }
        Ok(doc)
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|e| e.value.as_str())
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        let entry = Entry { value: value.into(), line: 0 };
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), entry);
    }

    pub fn remove(&mut self, section: &str, key: &str) {
        if let Some(s) = self.sections.get_mut(section) {
            s.remove(key);
        }
    }

    /// Sorted sections and keys, one `key = value` per line.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            out.push_str(&format!("[{name}]\n"));
            for (k, e) in entries {
                out.push_str(&format!("{k} = {}\n", e.value));
            }
        }
        out
    }

    /// Rejects sections outside `allowed`.
    pub fn check_sections(&self, allowed: &[&str]) -> Result<()> {
        match self.sections.keys().find(|s| !allowed.contains(&s.as_str())) {
            Some(s) => Err(Error::Config(format!("unknown section [{s}] (expected one of {})", allowed.join(", ")))),
            None => Ok(()),
        }
    }

    pub fn section(&self, name: &str) -> Option<Section<'_>> {
        self.sections.get(name).map(|entries| Section { name: name.to_string(), entries })
    }
}

/// Typed access to one section.
pub struct Section<'a> {
    pub name: String,
    entries: &'a BTreeMap<String, Entry>,
}

impl Section<'_> {
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, e)) => Err(Error::Config(format!("unknown key `{k}` in [{}] at line {}", self.name, e.line))),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn bad(&self, key: &str, what: &str) -> Error {
        let e = &self.entries[key];
        Error::Config(format!("[{}] {key} = `{}` at line {}: expected {what}", self.name, e.value, e.line))
    }

    pub fn str_or<'b>(&'b self, key: &str, default: &'b str) -> &'b str {
        self.raw(key).unwrap_or(default)
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<f64>().map(Some).map_err(|_| self.bad(key, "a number")),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    pub fn req_f64(&self, key: &str) -> Result<f64> {
        self.opt_f64(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<usize>().map(Some).map_err(|_| self.bad(key, "a nonnegative integer")),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.opt_usize(key)?.unwrap_or(default))
    }

    pub fn req_usize(&self, key: &str) -> Result<usize> {
        self.opt_usize(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse::<u64>().map_err(|_| self.bad(key, "an unsigned 64-bit integer")),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(_) => Err(self.bad(key, "true or false")),
        }
    }

    /// Comma-separated list.
    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.raw(key).map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
    }

    pub fn missing(&self, key: &str) -> Error {
        Error::Config(format!("missing required key `{key}` in [{}]", self.name))
    }

    pub fn invalid(&self, key: &str, what: &str) -> Error {
        self.bad(key, what)
    }
}
