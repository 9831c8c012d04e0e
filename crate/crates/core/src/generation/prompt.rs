//! The canonical generation prompt.
//!
//! A rendered prompt is, in order:
//!
//! ```text
//! /* <task instruction> */
//! /* Fill in every '?' in the target data entries with: <attr>, <attr>. */
//! /* No explanation. ... */
//! /* Columns: <key> (<type>), ..., <attr> */
//! /* <attr> may have several values: list them in one field, separated by commas. */
//! /* Permitted values for <attr>: one of the following */   (per closed attribute)
//! /* - <value> */
//! /* k examples are provided before the target data entry */ (only when k > 0)
//! <k demonstration rows>
//! /* Target data entries */
//! <key>,<key>,?
//! ```
//!
//! Rows are CSV. Fields containing commas or quotes are double-quoted.
//! Rendering is a pure function of its inputs, so the hash of a rendered
//! prompt can key caches and fixtures.

use sha2::{Digest, Sha256};

use crate::catalog::{Cardinality, ValueDomain, VirtualTableSpec};
use crate::error::{Error, Result};
use crate::generation::KeyTuple;

pub const NO_EXPLANATION: &str = "/* No explanation. Reply only with the completed target data entries, \
one comma-separated row per target data entry, in the column order above. \
Enclose a field in double quotes if it contains a comma. */";

/// The prefix placed before the demonstration rows.
pub fn fewshot_prefix(k: usize) -> String {
    format!("/* {k} examples are provided before the target data entry */")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueListBlock {
    pub attribute: String,
    pub values: Vec<String>,
}

impl ValueListBlock {
    fn render(&self, out: &mut String) {
        out.push_str(&format!(
            "/* Permitted values for {}: one of the following */\n",
            self.attribute
        ));
        for v in &self.values {
            out.push_str(&format!("/* - {v} */\n"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub spec: String,
    /// Header lines: task, fill directive, no-explanation rule, columns and
    /// many-value hints.
    pub instruction: String,
    pub value_list_blocks: Vec<ValueListBlock>,
    /// Demonstration rows; empty iff `k == 0`.
    pub example_block: Vec<String>,
    /// One row per target with a `?` for each generated attribute.
    pub target_block: Vec<String>,
    pub targets: Vec<KeyTuple>,
    pub k: usize,
}

impl Prompt {
    pub fn render(&self) -> String {
        let mut out = self.instruction.clone();
        for block in &self.value_list_blocks {
            block.render(&mut out);
        }
        if self.k > 0 {
            out.push_str(&fewshot_prefix(self.k));
            out.push('\n');
            for row in &self.example_block {
                out.push_str(row);
                out.push('\n');
            }
        }
        out.push_str("/* Target data entries */\n");
        for row in &self.target_block {
            out.push_str(row);
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the rendered text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Writes one CSV record without a line terminator.
pub(crate) fn csv_row<I, S>(fields: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer.write_record(fields).expect("write to Vec");
    let mut bytes = writer.into_inner().expect("flush to Vec");
    if bytes.last() == Some(&b'\n') {
        bytes.pop();
    }
    String::from_utf8(bytes).expect("csv of utf-8 input is utf-8")
}

/// Builds the prompt asking for `targets`, with the first `k` examples of
/// the spec's few-shot pool as demonstrations.
pub fn build_prompt(spec: &VirtualTableSpec, targets: &[KeyTuple], k: usize) -> Result<Prompt> {
    if targets.is_empty() {
        return Err(Error::NoTargets(spec.name.clone()));
    }
    if k > spec.fewshot_pool.len() {
        return Err(Error::FewShotTooLarge {
            spec: spec.name.clone(),
            k,
            pool: spec.fewshot_pool.len(),
        });
    }
    let gen_names: Vec<&str> = spec.gen_names().collect();

    let mut instruction = format!("/* {} */\n", spec.task_instruction.trim());
    instruction.push_str(&format!(
        "/* Fill in every '?' in the target data entries with: {}. */\n",
        gen_names.join(", ")
    ));
    instruction.push_str(NO_EXPLANATION);
    instruction.push('\n');
    let columns: Vec<String> = spec
        .key_attrs
        .iter()
        .map(|k| format!("{} ({})", k.name, k.semantic_type))
        .chain(gen_names.iter().map(|g| g.to_string()))
        .collect();
    instruction.push_str(&format!("/* Columns: {} */\n", columns.join(", ")));
    for attr in spec.gen_attrs.iter().filter(|a| a.cardinality == Cardinality::Many) {
        instruction.push_str(&format!(
            "/* {} may have several values: list them in one field, separated by commas. */\n",
            attr.name
        ));
    }

    let value_list_blocks = spec
        .gen_attrs
        .iter()
        .filter_map(|a| match &a.domain {
            ValueDomain::Closed(values) => Some(ValueListBlock {
                attribute: a.name.clone(),
                values: values.clone(),
            }),
            ValueDomain::Free => None,
        })
        .collect();

    let example_block = spec.fewshot_pool[..k]
        .iter()
        .map(|ex| csv_row(ex.keys.iter().chain(ex.values.iter())))
        .collect();

    let placeholders = vec!["?"; spec.gen_attrs.len()];
    let target_block = targets
        .iter()
        .map(|t| csv_row(t.values().iter().map(String::as_str).chain(placeholders.iter().copied())))
        .collect();

    Ok(Prompt {
        spec: spec.name.clone(),
        instruction,
        value_list_blocks,
        example_block,
        target_block,
        targets: targets.to_vec(),
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{AttributeSpec, FewShotExample, KeyAttr};

    const PUBLISHERS: [&str; 4] = ["Marvel Comics", "DC Comics", "Dark Horse Comics", "Image Comics"];

    fn spec() -> VirtualTableSpec {
        VirtualTableSpec {
            name: "hero_publisher".into(),
            database: "superhero".into(),
            base_table: "superhero".into(),
            task_instruction: "Identify the publisher of each superhero.".into(),
            key_attrs: vec![
                KeyAttr { name: "superhero_name".into(), semantic_type: "superhero name".into() },
                KeyAttr { name: "full_name".into(), semantic_type: "full name".into() },
            ],
            gen_attrs: vec![
                AttributeSpec {
                    name: "publisher_name".into(),
                    domain: ValueDomain::Closed(PUBLISHERS.iter().map(|s| s.to_string()).collect()),
                    cardinality: Cardinality::One,
                },
                AttributeSpec {
                    name: "powers".into(),
                    domain: ValueDomain::Free,
                    cardinality: Cardinality::Many,
                },
            ],
            fewshot_pool: vec![
                FewShotExample {
                    keys: vec!["3-D Man".into(), "Charles Chandler".into()],
                    values: vec!["Marvel Comics".into(), "Agility, Super Strength".into()],
                },
                FewShotExample {
                    keys: vec!["Aquaman".into(), "Arthur Curry".into()],
                    values: vec!["DC Comics".into(), "Water Breathing".into()],
                },
            ],
        }
    }

    fn targets() -> Vec<KeyTuple> {
        vec![KeyTuple::new(["Spider-Man", "Peter Parker"])]
    }

    /// The header line of the first value list plus its `- value` lines.
    fn value_block_text(rendered: &str) -> String {
        let start = rendered.find("/* Permitted values").unwrap();
        let mut lines = rendered[start..].lines();
        let mut block = vec![lines.next().unwrap()];
        block.extend(lines.take_while(|l| l.starts_with("/* - ")));
        block.join("\n")
    }

    #[test]
    fn closed_domain_listed_once_each() {
        let p = build_prompt(&spec(), &targets(), 0).unwrap();
        let text = p.render();
        let block = value_block_text(&text);
        for name in PUBLISHERS {
            assert_eq!(block.matches(&format!("- {name} */")).count(), 1, "{name}");
        }
        assert_eq!(p.value_list_blocks.len(), 1);
        assert_eq!(p.value_list_blocks[0].values, PUBLISHERS);
    }

    #[test]
    fn one_shot_includes_demonstration() {
        let p = build_prompt(&spec(), &targets(), 1).unwrap();
        let text = p.render();
        assert!(text.contains("/* 1 examples are provided before the target data entry */\n3-D Man,Charles Chandler,Marvel Comics,\"Agility, Super Strength\"\n"));
        assert_eq!(p.example_block.len(), 1);
        assert!(!text.contains("Aquaman"));
    }

    #[test]
    fn zero_shot_has_no_examples() {
        let p = build_prompt(&spec(), &targets(), 0).unwrap();
        let text = p.render();
        assert!(p.example_block.is_empty());
        assert!(!text.contains("examples are provided"));
        assert!(!text.contains("3-D Man"));
    }

    #[test]
    fn directives_and_placeholders() {
        let p = build_prompt(&spec(), &targets(), 2).unwrap();
        let text = p.render();
        assert!(text.contains(NO_EXPLANATION));
        assert!(text.contains("publisher_name, powers"));
        assert!(text.starts_with("/* Identify the publisher of each superhero. */\n"));
        assert_eq!(p.target_block, ["Spider-Man,Peter Parker,?,?"]);
        assert!(text.ends_with("/* Target data entries */\nSpider-Man,Peter Parker,?,?\n"));
        assert!(text.contains("/* 2 examples"));
    }

    #[test]
    fn key_values_with_commas_are_quoted() {
        let p = build_prompt(&spec(), &[KeyTuple::new(["Hulk", "Banner, Bruce"])], 0).unwrap();
        assert_eq!(p.target_block, ["Hulk,\"Banner, Bruce\",?,?"]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            build_prompt(&spec(), &targets(), 3),
            Err(Error::FewShotTooLarge { k: 3, pool: 2, .. })
        ));
        assert!(matches!(build_prompt(&spec(), &[], 0), Err(Error::NoTargets(_))));
    }

    #[test]
    fn pure_and_hash_stable() {
        let a = build_prompt(&spec(), &targets(), 1).unwrap();
        let b = build_prompt(&spec(), &targets(), 1).unwrap();
        assert_eq!(a.render(), b.render());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), build_prompt(&spec(), &targets(), 0).unwrap().hash());
    }
}
