// SPDX-License-Identifier: MIT OR Apache-2.0

//! Built-in fixture datasets: templated financial news, labeled
//! headlines, hand-labeled sentiment sentences, loan-application texts and
//! a small filing corpus for retrieval. Generators are seeded and
//! deterministic.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabeledText, Sentiment, SentimentExample};
use crate::store::Document;

const COMPANIES: &[&str] = &[
    "Acme Corp", "Globex", "Initech", "Umbrella Holdings", "Stark Industries", "Wayne Enterprises",
    "Hooli", "Vandelay Imports", "Cyberdyne Systems", "Soylent Foods", "Tyrell Group", "Wonka Brands",
];
const TICKERS: &[&str] = &["ACME", "GLBX", "INTC", "UMBR", "STRK", "WAYN", "HOOL", "VAND", "CYBD", "SOYL", "TYRL", "WONK"];
const UP_EVENTS: &[&str] = &[
    "beat quarterly earnings estimates",
    "raised its full-year revenue guidance",
    "announced a larger share buyback",
    "won a major government contract",
    "reported record profit margins",
    "received an analyst upgrade to buy",
    "increased its dividend",
    "posted strong subscriber growth",
];
const DOWN_EVENTS: &[&str] = &[
    "missed quarterly earnings estimates",
    "cut its revenue outlook",
    "disclosed a regulatory investigation",
    "warned of weaker demand",
    "reported a surprise loss",
    "was downgraded by analysts",
    "suspended its dividend",
    "faces a costly product recall",
];
const MACRO: &[&str] = &[
    "The central bank held interest rates steady.",
    "Bond yields climbed as inflation data came in hot.",
    "Oil prices fell on rising inventories.",
    "The dollar strengthened against the euro.",
    "Credit spreads widened amid default concerns.",
    "Unemployment claims dropped for a third week.",
    "Mortgage rates reached a new high for the year.",
    "Stock indexes closed mixed after a volatile session.",
];
const GENERAL: &[&str] = &[
    "The weather stayed mild across the region.",
    "The local team won its home game on Sunday.",
    "A new museum exhibit opened downtown.",
    "Researchers published a study on sleep habits.",
    "The city council approved a new park.",
    "A popular film topped the box office again.",
    "Volunteers cleaned the river banks this weekend.",
    "The library extended its opening hours.",
];
const CITIES: &[&str] = &["New York", "London", "Tokyo", "Frankfurt", "Chicago", "Singapore"];

fn headline(rng: &mut ChaCha8Rng, up: bool) -> String {
    let i = rng.random_range(0..COMPANIES.len());
    let event = if up { UP_EVENTS } else { DOWN_EVENTS }.choose(rng).unwrap();
    match rng.random_range(0..3) {
        0 => format!("{} {event}", COMPANIES[i]),
        1 => format!("{} ({}) {event}", COMPANIES[i], TICKERS[i]),
        _ => format!("{} shares in {}: company {event}", TICKERS[i], CITIES.choose(rng).unwrap()),
    }
}

/// Headlines labeled `up` or `down`, balanced in expectation.
pub fn labeled_headlines(n: usize, seed: u64) -> Vec<LabeledText> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let up = rng.random_bool(0.5);
            LabeledText {
                text: headline(&mut rng, up),
                label: if up { "up" } else { "down" }.to_string(),
            }
        })
        .collect()
}

/// Documents of 4–8 sentences mixing company news, macro commentary and
/// (with probability `p_general` per sentence) unrelated general news.
pub fn news_corpus(n_docs: usize, p_general: f64, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|d| {
            let n = rng.random_range(4..=8);
            let sentences: Vec<String> = (0..n)
                .map(|_| {
                    if rng.random_bool(p_general) {
                        GENERAL.choose(&mut rng).unwrap().to_string()
                    } else if rng.random_bool(0.4) {
                        MACRO.choose(&mut rng).unwrap().to_string()
                    } else {
                        let up = rng.random_bool(0.5);
                        format!("{}.", headline(&mut rng, up))
                    }
                })
                .collect();
            Document::new(format!("news-{d:05}"), sentences.join(" "))
        })
        .collect()
}

/// Fifty hand-labeled sentences, ten per category, graded by what they
/// imply for a company's ability to service its debt.
pub fn sentiment_sentences() -> Vec<SentimentExample> {
    use Sentiment::*;
    let rows: [(&str, Sentiment); 50] = [
        ("The company repaid all outstanding debt two years ahead of schedule.", VeryPositive),
        ("Record cash flow allowed the firm to retire its entire bond issue.", VeryPositive),
        ("Moody's upgraded the issuer to investment grade after a blowout year.", VeryPositive),
        ("Revenue doubled and the balance sheet now carries no net debt.", VeryPositive),
        ("The lender reported zero defaults and record capital ratios.", VeryPositive),
        ("Profits surged to an all-time high and leverage fell sharply.", VeryPositive),
        ("The firm secured a large credit line at its lowest rate ever.", VeryPositive),
        ("Strong earnings let the company double its interest coverage.", VeryPositive),
        ("Cash reserves now exceed total liabilities by a wide margin.", VeryPositive),
        ("The company's credit rating was raised two notches this quarter.", VeryPositive),
        ("Quarterly sales rose modestly and margins held steady.", SomewhatPositive),
        ("The firm refinanced part of its debt at a slightly lower rate.", SomewhatPositive),
        ("Operating income improved a little despite higher costs.", SomewhatPositive),
        ("The outlook was revised from negative to stable by one agency.", SomewhatPositive),
        ("Customer demand recovered gradually over the past months.", SomewhatPositive),
        ("The company trimmed its leverage ratio by a small amount.", SomewhatPositive),
        ("Free cash flow turned positive for the first time in a year.", SomewhatPositive),
        ("Management expects a mild improvement in working capital.", SomewhatPositive),
        ("The bank reported a small decline in non-performing loans.", SomewhatPositive),
        ("New contracts should add some revenue next year.", SomewhatPositive),
        ("The company will hold its annual meeting in May.", Neutral),
        ("The board appointed a new chief financial officer.", Neutral),
        ("Revenue was unchanged compared with the prior quarter.", Neutral),
        ("The firm moved its headquarters to a different city.", Neutral),
        ("The company filed its annual report on time.", Neutral),
        ("Debt levels were in line with last year's figures.", Neutral),
        ("The issuer's rating was affirmed with a stable outlook.", Neutral),
        ("The company released a new version of its software.", Neutral),
        ("Management reiterated its existing guidance.", Neutral),
        ("The firm completed a routine audit of its accounts.", Neutral),
        ("Margins narrowed slightly as input costs increased.", SomewhatNegative),
        ("The company drew down more of its revolving credit facility.", SomewhatNegative),
        ("One agency placed the issuer on watch for a possible downgrade.", SomewhatNegative),
        ("Sales dipped and inventory levels began to build.", SomewhatNegative),
        ("Interest expense rose faster than operating income.", SomewhatNegative),
        ("The firm delayed a planned expansion to conserve cash.", SomewhatNegative),
        ("Late payments from customers increased this quarter.", SomewhatNegative),
        ("The company's leverage ticked up after an acquisition.", SomewhatNegative),
        ("Analysts flagged a modest weakening in liquidity.", SomewhatNegative),
        ("Quarterly revenue fell short of expectations.", SomewhatNegative),
        ("The company missed an interest payment on its senior notes.", VeryNegative),
        ("The firm filed for bankruptcy protection after talks with lenders failed.", VeryNegative),
        ("The issuer was downgraded to junk after massive losses.", VeryNegative),
        ("Auditors raised substantial doubt about the company's survival.", VeryNegative),
        ("The lender's loan losses wiped out most of its capital.", VeryNegative),
        ("Creditors accelerated the debt after covenants were breached.", VeryNegative),
        ("The company defaulted on its bank loans.", VeryNegative),
        ("Cash is expected to run out within three months.", VeryNegative),
        ("Revenue collapsed and the firm cannot refinance maturing bonds.", VeryNegative),
        ("Regulators seized the bank after a run on deposits.", VeryNegative),
    ];
    rows.into_iter()
        .map(|(t, l)| SentimentExample {
            text: t.to_string(),
            label: l,
        })
        .collect()
}

/// Loan-application style texts; the first half mention protected or
/// proxy attributes, the second half only financial facts.
pub fn loan_texts() -> Vec<Document> {
    [
        "Applicant is a 62 year old widow living alone; requests a 30 year mortgage.",
        "The borrower is a young single mother of three from a minority neighborhood.",
        "Applicant recently immigrated and attends church in a largely foreign community.",
        "The applicant, an elderly woman, is asking for a small business loan.",
        "He is a disabled veteran applying for an auto loan; his wife is unemployed.",
        "Applicant earns 85,000 dollars per year with a debt-to-income ratio of 22 percent.",
        "The borrower has a credit score of 740 and six years of stable employment.",
        "Applicant requests 250,000 dollars with a 20 percent down payment.",
        "Monthly income covers the proposed payment 3.1 times; no late payments.",
        "The business has positive cash flow and two years of audited statements.",
    ]
    .iter()
    .enumerate()
    .map(|(i, t)| Document::new(format!("loan-{i:02}"), *t))
    .collect()
}

/// A small filing-style corpus for retrieval tests.
pub fn rag_documents() -> Vec<Document> {
    [
        ("acme-10k", "Acme Corp reported total revenue of 4.2 billion dollars for fiscal 2023, up 8 percent. Net income was 310 million dollars. Long-term debt stood at 1.1 billion dollars, and the company holds 600 million dollars in cash."),
        ("globex-10k", "Globex recorded revenue of 2.7 billion dollars, down 3 percent, due to weaker demand in Europe. The company refinanced 500 million dollars of notes due 2025 at a fixed rate of 5.1 percent."),
        ("initech-10q", "Initech's quarterly operating margin improved to 14 percent. The board authorized a 200 million dollar share repurchase program and kept the quarterly dividend at 12 cents per share."),
        ("umbrella-8k", "Umbrella Holdings disclosed that it breached a leverage covenant under its credit agreement and is negotiating a waiver with its lenders."),
        ("rates-note", "The central bank raised its policy rate by 25 basis points to 5.5 percent, citing persistent inflation in services."),
    ]
    .iter()
    .map(|(id, t)| Document::new(*id, *t))
    .collect()
}
