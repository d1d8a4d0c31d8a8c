//! Parses a raw clickstream log, drops malformed rows and overlong
//! sessions, and prints what survived.

use hetlm::corpus::{filter_sessions, parse_log, LogFormat, Vocabulary};

const LOG: &str = "\
user_id,session_id,timestamp,page
alice,a1,100,Home
alice,a1,101,Shoes
alice,a2,900,Shoes
alice,a2,905,Cart
alice,a3,2000,Home
bob,b1,50,Home
bob,b1,60,Bags
bob,b2,700,Bags
bob,b2,not-a-time,Cart
bob,b3,1500,Bags
bob,b3,1510,Cart
bob,b3,1520,Purchase
carol,c1,10,Home
";

fn main() -> hetlm::Result<()> {
    let parsed = parse_log(LOG.as_bytes(), LogFormat::Csv)?;
    println!("{} rows, {} malformed", parsed.rows, parsed.row_errors.len());
    for e in &parsed.row_errors {
        println!("  line {}: {}", e.line, e.message);
    }
    // carol has a single session and cannot contribute a target.
    println!("users excluded for too few sessions: {}", parsed.excluded_users);

    let (ds, summary) = filter_sessions(&parsed.dataset, 1, 95.0)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);

    let vocab = Vocabulary::build(&ds)?;
    for r in &ds.records {
        let input: Vec<Vec<&str>> = r.input_sessions.iter().map(|s| s.pages.iter().map(String::as_str).collect()).collect();
        println!("{}: {:?} -> {:?}", r.user_id, input, r.actual_session.pages);
    }
    println!("pages: {:?}", vocab.pages());
    Ok(())
}
