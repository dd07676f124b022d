//! Attacker intentions and the policies that address them. The same table
//! is published in `docs/threat_mapping.md`.

use super::builtin::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// A shipped policy enforces it.
    BuiltIn(&'static [&'static str]),
    /// Expressible by combining shipped building blocks; not shipped.
    Expressible(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Intention {
    pub name: &'static str,
    pub tags: &'static [&'static str],
    pub coverage: Coverage,
}

pub const INTENTIONS: &[Intention] = &[
    Intention {
        name: "Server resource limit",
        tags: &["ResponseDataLimit"],
        coverage: Coverage::BuiltIn(&[RESPONSE_SIZE]),
    },
    Intention {
        name: "Denial of Inventory",
        tags: &["AddToCart"],
        coverage: Coverage::BuiltIn(&[CART_HOLD]),
    },
    Intention {
        name: "Scalping",
        tags: &["PurchaseProduct"],
        coverage: Coverage::BuiltIn(&[PURCHASE_LIMIT]),
    },
    Intention {
        name: "Spamming",
        tags: &["Commenting"],
        coverage: Coverage::BuiltIn(&[COMMENT_RATE]),
    },
    Intention {
        name: "Account registrations",
        tags: &["UserRegistration"],
        coverage: Coverage::BuiltIn(&[REGISTRATION_RATE]),
    },
    Intention {
        name: "Card cracking",
        tags: &["PurchaseProduct"],
        coverage: Coverage::Expressible(
            "per-source count_by_tag over PurchaseProduct with a short window, as LoginRate does for Login",
        ),
    },
    Intention {
        name: "Carding",
        tags: &["PurchaseProduct"],
        coverage: Coverage::Expressible(
            "per-source count of small PurchaseProduct requests via window_aggregate with a source filter",
        ),
    },
    Intention {
        name: "Credential stuffing",
        tags: &["Login"],
        coverage: Coverage::BuiltIn(&[LOGIN_RATE]),
    },
    Intention {
        name: "Plaintext tokens",
        tags: &["Login", "ContainsAuthTokens"],
        coverage: Coverage::BuiltIn(&[LOGIN_RATE, TOKEN_IN_URL]),
    },
];

/// Every built-in policy name used in the table.
pub fn builtin_policies() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = INTENTIONS
        .iter()
        .filter_map(|i| match i.coverage {
            Coverage::BuiltIn(p) => Some(p),
            Coverage::Expressible(_) => None,
        })
        .flatten()
        .copied()
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyChain;
    use crate::taxonomy::default_taxonomy;

    const DOC: &str = include_str!("../../../../docs/threat_mapping.md");

    const ROWS: [&str; 9] = [
        "Server resource limit",
        "Denial of Inventory",
        "Scalping",
        "Spamming",
        "Account registrations",
        "Card cracking",
        "Carding",
        "Credential stuffing",
        "Plaintext tokens",
    ];

    #[test]
    fn every_intention_is_mapped() {
        let names: Vec<&str> = INTENTIONS.iter().map(|i| i.name).collect();
        assert_eq!(names, ROWS);
    }

    #[test]
    fn card_rows_are_expressible_only() {
        for i in INTENTIONS {
            let expressible = matches!(i.coverage, Coverage::Expressible(_));
            assert_eq!(expressible, i.name.starts_with("Card"), "{}", i.name);
        }
    }

    #[test]
    fn every_builtin_policy_has_an_intention() {
        let mut chain = PolicyChain::builtin().handler_names();
        chain.sort();
        chain.dedup();
        assert_eq!(chain, builtin_policies());
    }

    #[test]
    fn tags_exist_in_taxonomy() {
        let tx = default_taxonomy();
        for i in INTENTIONS {
            for t in i.tags {
                assert!(tx.by_name(t).is_some(), "{t}");
            }
        }
    }

    #[test]
    fn doc_table_matches() {
        for i in INTENTIONS {
            let row = DOC
                .lines()
                .find(|l| l.starts_with(&format!("| {} |", i.name)))
                .unwrap_or_else(|| panic!("no doc row for {}", i.name));
            match i.coverage {
                Coverage::BuiltIn(ps) => {
                    for p in ps {
                        assert!(row.contains(&format!("`{p}`")), "{row}");
                    }
                }
                Coverage::Expressible(_) => assert!(row.contains("expressible"), "{row}"),
            }
        }
    }
}
