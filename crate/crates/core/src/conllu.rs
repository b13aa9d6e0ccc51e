//! Reader for the subset of CoNLL-U this crate needs.
//!
//! Only ID, FORM, HEAD and DEPREL are read. Multiword-token ranges (`3-4`)
//! and empty nodes (`5.1`) are skipped. A `# id = <id>` comment anchors a
//! sentence to a dataset record; sentences without one continue the most
//! recent id.

use std::collections::BTreeMap;
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::synmask::DependencyTriple;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConlluToken {
    /// 1-based word index.
    pub id: usize,
    pub form: String,
    /// 0 for the root.
    pub head: usize,
    pub deprel: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSentence {
    pub record_id: String,
    /// Line number of the first token, 1-based.
    pub line: usize,
    pub tokens: Vec<ConlluToken>,
}

impl ParsedSentence {
    pub fn forms(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.form.as_str()).collect()
    }

    /// `(HEAD - 1, ID - 1, DEPREL)` for every non-root token.
    pub fn triples(&self) -> Vec<DependencyTriple> {
        self.tokens
            .iter()
            .filter(|t| t.head > 0)
            .map(|t| DependencyTriple::new(t.head - 1, t.id - 1, t.deprel.clone()))
            .collect()
    }
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn read_conllu<R: BufRead>(reader: R) -> Result<Vec<ParsedSentence>> {
    let mut out = Vec::new();
    let mut current_id: Option<String> = None;
    let mut tokens: Vec<ConlluToken> = Vec::new();
    let mut first_line = 0;

    let finish = |tokens: &mut Vec<ConlluToken>,
                  current_id: &Option<String>,
                  first_line: usize,
                  out: &mut Vec<ParsedSentence>|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let n = tokens.len();
        for t in tokens.iter() {
            if t.head > n {
                return Err(parse_error(
                    first_line,
                    format!("token {} has head {} beyond sentence length {n}", t.id, t.head),
                ));
            }
        }
        let record_id = current_id
            .clone()
            .ok_or_else(|| parse_error(first_line, "sentence before any `# id =` comment"))?;
        out.push(ParsedSentence {
            record_id,
            line: first_line,
            tokens: std::mem::take(tokens),
        });
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            finish(&mut tokens, &current_id, first_line, &mut out)?;
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "id" {
                    finish(&mut tokens, &current_id, first_line, &mut out)?;
                    current_id = Some(value.trim().to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() < 8 {
            return Err(parse_error(
                line_no,
                format!("expected at least 8 tab-separated columns, found {}", cols.len()),
            ));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0]
            .parse()
            .map_err(|_| parse_error(line_no, format!("bad ID {:?}", cols[0])))?;
        if id != tokens.len() + 1 {
            return Err(parse_error(line_no, format!("ID {id} out of sequence")));
        }
        let head: usize = cols[6]
            .parse()
            .map_err(|_| parse_error(line_no, format!("bad HEAD {:?}", cols[6])))?;
        if head == id {
            return Err(parse_error(line_no, format!("token {id} is its own head")));
        }
        if tokens.is_empty() {
            first_line = line_no;
        }
        tokens.push(ConlluToken {
            id,
            form: cols[1].to_string(),
            head,
            deprel: cols[7].to_string(),
        });
    }
    finish(&mut tokens, &current_id, first_line, &mut out)?;
    Ok(out)
}

/// Groups sentences by record id, keeping file order within each record.
pub fn group_by_record(sentences: Vec<ParsedSentence>) -> BTreeMap<String, Vec<ParsedSentence>> {
    let mut map: BTreeMap<String, Vec<ParsedSentence>> = BTreeMap::new();
    for s in sentences {
        map.entry(s.record_id.clone()).or_default().push(s);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# id = q1
# text = Jordin was declared the winner
1\tJordin\tJordin\tPROPN\t_\t_\t3\tnsubj:pass\t_\t_
2\twas\tbe\tAUX\t_\t_\t3\taux:pass\t_\t_
3\tdeclared\tdeclare\tVERB\t_\t_\t0\troot\t_\t_
4-5\tthe winner\t_\t_\t_\t_\t_\t_\t_\t_
4\tthe\tthe\tDET\t_\t_\t5\tdet\t_\t_
4.1\tghost\t_\t_\t_\t_\t_\t_\t_\t_
5\twinner\twinner\tNOUN\t_\t_\t3\txcomp\t_\t_

# id = q2
1\tYes\tyes\tINTJ\t_\t_\t0\troot\t_\t_
";

    #[test]
    fn reads_blocks_and_triples() {
        let sents = read_conllu(SAMPLE.as_bytes()).unwrap();
        assert_eq!(sents.len(), 2);
        assert_eq!(sents[0].record_id, "q1");
        assert_eq!(sents[0].forms(), ["Jordin", "was", "declared", "the", "winner"]);
        assert_eq!(
            sents[0].triples(),
            vec![
                DependencyTriple::new(2, 0, "nsubj:pass"),
                DependencyTriple::new(2, 1, "aux:pass"),
                DependencyTriple::new(4, 3, "det"),
                DependencyTriple::new(2, 4, "xcomp"),
            ]
        );
        assert!(sents[1].triples().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let bad = "# id = a\n1\tx\tx\tX\t_\t_\t0\troot\t_\t_\n2\tbroken line\n";
        match read_conllu(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let bad_head = "# id = a\n1\tx\tx\tX\t_\t_\tzz\troot\t_\t_\n";
        assert!(matches!(read_conllu(bad_head.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let far_head = "# id = a\n1\tx\tx\tX\t_\t_\t4\tdep\t_\t_\n";
        assert!(read_conllu(far_head.as_bytes()).is_err());
    }

    #[test]
    fn unanchored_sentences_continue_previous_id() {
        let text = "# id = r\n1\ta\ta\tX\t_\t_\t0\troot\t_\t_\n\n1\tb\tb\tX\t_\t_\t0\troot\t_\t_\n";
        let grouped = group_by_record(read_conllu(text.as_bytes()).unwrap());
        assert_eq!(grouped["r"].len(), 2);
        let orphan = "1\ta\ta\tX\t_\t_\t0\troot\t_\t_\n";
        assert!(read_conllu(orphan.as_bytes()).is_err());
    }
}
