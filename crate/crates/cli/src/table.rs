//! Versioned CSV tables.

use crate::CliError;

pub const SCHEMA_LINE: &str = "# schema=1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CliError> {
        let mut out = format!("{SCHEMA_LINE}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header)?;
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush().map_err(|e| CliError::io("<csv buffer>", e))?;
        }
        Ok(out)
    }

    /// Parses a table written by [`CsvTable::to_bytes`].
    pub fn parse(bytes: &[u8]) -> Result<Self, CliError> {
        let text = std::str::from_utf8(bytes).map_err(|e| CliError::Malformed(e.to_string()))?;
        let body = text
            .strip_prefix(SCHEMA_LINE)
            .and_then(|r| r.strip_prefix('\n'))
            .ok_or_else(|| CliError::Malformed("missing schema line".into()))?;
        let mut r = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|x| x.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_line_and_quoting() {
        let mut t = CsvTable::new(&["kernel", "value"]);
        t.push(vec!["kerple_log(r=2,k=1)".into(), "0.5".into()]);
        let bytes = t.to_bytes().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("# schema=1\nkernel,value\n\"kerple_log(r=2,k=1)\",0.5\n"));
        assert_eq!(CsvTable::parse(&bytes).unwrap(), t);
        assert!(CsvTable::parse(b"kernel\n").is_err());
    }
}
