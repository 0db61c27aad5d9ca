//! End-to-end acceptance checks, run against the built binary.
//!
//! Prints one `PASS`/`FAIL` line per criterion and exits non-zero if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use pseudovault_core::{generate_hi, open_store, validate_hi, Access, Credential};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const SECRET: &str = "acceptance-secret";
const BIN: &str = env!("CARGO_BIN_EXE_pseudovault");
const SAMPLE_IDS: [&str; 2] = ["8001567898761234", "8008123456785000"];

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("PSEUDOVAULT_SECRET", SECRET)
        .output()
        .expect("spawn pseudovault")
}

fn ok(out: &Output) -> Result<String, String> {
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "exit {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let header = r
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(str::to_owned)
        .collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_owned).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    Ok((header, rows))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .unwrap();
    w.write_record(header).unwrap();
    for r in rows {
        w.write_record(r).unwrap();
    }
    w.flush().unwrap();
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// The visits fixture through the CLI in per-occurrence mode, then the store
/// export checked as one two-column mapping table per substituted column.
fn worked_example() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let (store, out) = (dir.path().join("store"), dir.path().join("release"));
    let started = Instant::now();
    ok(&run(&[
        "pseudo",
        "--schema",
        s(&fixture("visits.schema")),
        "--policy",
        s(&fixture("per_occurrence.policy")),
        "--store",
        s(&store),
        "--out",
        s(&out),
        s(&fixture("visits.csv")),
    ]))?;
    let elapsed = started.elapsed();
    check(elapsed < Duration::from_secs(1), || format!("pseudo took {elapsed:?}"))?;

    let (h0, original) = read_csv(&fixture("visits.csv"))?;
    let (h1, released) = read_csv(&out.join("visits.csv"))?;
    check(h0 == h1, || format!("header changed: {h1:?}"))?;
    check(released.len() == 3, || format!("{} rows released", released.len()))?;
    for col in [0, 4] {
        let distinct: BTreeSet<_> = released.iter().map(|r| &r[col]).collect();
        check(distinct.len() == 3, || {
            format!("column {} has {} distinct tokens", h0[col], distinct.len())
        })?;
        for (o, r) in original.iter().zip(&released) {
            check(o[col] != r[col], || format!("{} not substituted", o[col]))?;
        }
    }
    for col in [1, 2, 3] {
        for (o, r) in original.iter().zip(&released) {
            check(o[col] == r[col], || {
                format!("{} changed: {} -> {}", h0[col], o[col], r[col])
            })?;
        }
    }

    let export = ok(&run(&["store", "export", "--store", s(&store)]))?;
    let mut tables: Vec<(String, Vec<String>)> = Vec::new();
    for line in export.lines() {
        if let Some(name) = line.strip_prefix("Table: ") {
            tables.push((name.to_owned(), Vec::new()));
        } else if !line.is_empty() {
            tables.last_mut().ok_or("row before table")?.1.push(line.to_owned());
        }
    }
    check(tables.len() == 2, || format!("{} tables exported", tables.len()))?;
    for ((name, lines), col) in tables.iter().zip([0usize, 4]) {
        check(name == &h0[col], || format!("table {name} for column {}", h0[col]))?;
        check(lines.len() == 4, || format!("table {name}: {} lines", lines.len()))?;
        let want_header = format!("{0},{0} Pseudonym", h0[col]);
        check(lines[0] == want_header, || format!("table header {}", lines[0]))?;
        for ((line, o), r) in lines[1..].iter().zip(&original).zip(&released) {
            let want = format!("{},{}", o[col], r[col]);
            check(line == &want, || format!("table row `{line}`, want `{want}`"))?;
        }
    }
    Ok(())
}

fn luhn_conformance() -> Result<(), String> {
    let out = run(&["validate-hi", SAMPLE_IDS[0], SAMPLE_IDS[1]]);
    let text = ok(&out)?;
    let want = format!("{} VALID\n{} VALID\n", SAMPLE_IDS[0], SAMPLE_IDS[1]);
    check(text == want, || format!("validate-hi printed {text:?}"))?;

    for id in SAMPLE_IDS {
        check(validate_hi(id).luhn_valid, || format!("{id} rejected"))?;
        let mut mutants = Vec::new();
        for pos in 0..16 {
            for d in b'0'..=b'9' {
                let mut m = id.as_bytes().to_vec();
                if m[pos] == d {
                    continue;
                }
                m[pos] = d;
                mutants.push(String::from_utf8(m).unwrap());
            }
        }
        check(mutants.len() == 144, || format!("{} mutants", mutants.len()))?;
        for m in &mutants {
            let r = validate_hi(m);
            check(!r.is_valid() && !r.luhn_valid, || {
                format!("mutant {m} of {id} accepted")
            })?;
        }
        let mut args = vec!["validate-hi"];
        args.extend(mutants.iter().map(String::as_str));
        let out = run(&args);
        check(out.status.code() == Some(1), || {
            format!("validate-hi exit {:?}", out.status.code())
        })?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        let invalid = stdout.lines().filter(|l| l.ends_with(" INVALID CHECKSUM")).count();
        check(invalid == 144, || {
            format!("{invalid} of 144 mutants reported as CHECKSUM")
        })?;
    }
    Ok(())
}

const COLUMNS: [&str; 5] = ["patient", "visit", "name", "note", "code"];
const IDENTIFYING: [usize; 2] = [0, 2];

struct Generated {
    rows: Vec<Vec<String>>,
}

fn identifying_value(rng: &mut ChaCha20Rng) -> String {
    const UPPER: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    let len = rng.random_range(4..=24);
    let mut v = String::new();
    v.push(UPPER[rng.random_range(0..UPPER.len())] as char);
    while v.chars().count() < len {
        let c = match rng.random_range(0..40) {
            0..=25 => (b'A' + rng.random_range(0..26)) as char,
            26..=33 => (b'0' + rng.random_range(0..10)) as char,
            34 => '"',
            35 => 'é',
            36 => ' ',
            37 => 'Ø',
            // a comma can join the tail of one token to the head of the next,
            // so only long values carry one
            _ if len >= 12 => ',',
            _ => 'K',
        };
        v.push(c);
    }
    v
}

fn clear_value(rng: &mut ChaCha20Rng) -> String {
    const CHARS: &[char] = &['a', 'e', 'q', 'z', ',', '"', ' ', 'ü', '\n', '-', 'ß'];
    let len = rng.random_range(0..=20);
    (0..len).map(|_| CHARS[rng.random_range(0..CHARS.len())]).collect()
}

/// Identifying cells come from small pools so that duplicate identities
/// are forced whenever there are two or more rows.
fn generate(rng: &mut ChaCha20Rng) -> Generated {
    let n = rng.random_range(1..=500usize);
    let pool = |rng: &mut ChaCha20Rng| {
        let size = rng.random_range(1..=(n / 2).max(1));
        let mut set = BTreeSet::new();
        while set.len() < size {
            set.insert(identifying_value(rng));
        }
        set.into_iter().collect::<Vec<_>>()
    };
    let patients = pool(rng);
    let names = pool(rng);
    let rows = (0..n)
        .map(|i| {
            vec![
                patients[rng.random_range(0..patients.len())].clone(),
                format!("{}-{i}", rng.random_range(0..1000)),
                names[rng.random_range(0..names.len())].clone(),
                clear_value(rng),
                clear_value(rng),
            ]
        })
        .collect();
    Generated { rows }
}

fn partition(rows: &[Vec<String>], key: impl Fn(&Vec<String>) -> Vec<String>) -> BTreeSet<Vec<usize>> {
    let mut groups: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry(key(r)).or_default().push(i);
    }
    groups.into_values().collect()
}

struct CorpusResult {
    roundtrip: Result<(), String>,
    leakage: Result<(), String>,
    linkage: Result<(), String>,
}

fn first_err(slot: &mut Result<(), String>, r: Result<(), String>) {
    if slot.is_ok() {
        *slot = r;
    }
}

/// 200 generated datasets, each pseudonymised in both modes, re-identified,
/// rotated and re-identified again at the release epoch.
fn corpus() -> CorpusResult {
    let dir = tempfile::tempdir().unwrap();
    let schema = dir.path().join("gen.schema");
    fs::write(
        &schema,
        "patient = IDENTIFYING,TEXT\nvisit = CLEAR,TEXT\nname = IDENTIFYING,TEXT\nnote = SENSITIVE_CLEAR,TEXT\ncode = CLEAR,TEXT\n",
    )
    .unwrap();
    let policies: Vec<(&str, PathBuf)> = ["PER_ENTITY", "PER_OCCURRENCE"]
        .into_iter()
        .map(|mode| {
            let p = dir.path().join(format!("{mode}.policy"));
            fs::write(&p, format!("mode = {mode}\ncolumn = patient\ncolumn = name\n")).unwrap();
            (mode, p)
        })
        .collect();

    let mut result = CorpusResult {
        roundtrip: Ok(()),
        leakage: Ok(()),
        linkage: Ok(()),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed);
    for case in 0..200 {
        let g = generate(&mut rng);
        let input = dir.path().join(format!("case{case}.csv"));
        write_csv(&input, &COLUMNS, &g.rows);
        let input_bytes = fs::read(&input).unwrap();
        for (mode, policy) in &policies {
            let work = dir.path().join(format!("case{case}-{mode}"));
            let (store, out) = (work.join("store"), work.join("release"));
            let seed = rng.random::<u64>().to_string();
            let r = ok(&run(&[
                "pseudo",
                "--schema",
                s(&schema),
                "--policy",
                s(policy),
                "--store",
                s(&store),
                "--out",
                s(&out),
                "--seed",
                &seed,
                s(&input),
            ]));
            if let Err(e) = r {
                let e = format!("case {case} {mode}: pseudo {e}");
                first_err(&mut result.roundtrip, Err(e.clone()));
                first_err(&mut result.leakage, Err(e.clone()));
                first_err(&mut result.linkage, Err(e));
                continue;
            }
            let released = out.join(format!("case{case}.csv"));
            first_err(
                &mut result.roundtrip,
                roundtrip(case, mode, &work, &store, &released, &input_bytes),
            );
            first_err(&mut result.leakage, leakage(case, mode, &out, &g));
            if *mode == "PER_ENTITY" {
                first_err(&mut result.linkage, linkage(case, &released, &g));
            }
        }
        let _ = fs::remove_dir_all(dir.path().join(format!("case{case}-PER_ENTITY")));
        let _ = fs::remove_dir_all(dir.path().join(format!("case{case}-PER_OCCURRENCE")));
    }
    result
}

fn roundtrip(case: usize, mode: &str, work: &Path, store: &Path, released: &Path, input: &[u8]) -> Result<(), String> {
    let ctx = |what: &str, e: String| format!("case {case} {mode}: {what} {e}");
    let back = work.join("back");
    let restored = back.join(released.file_name().unwrap());
    ok(&run(&["reid", "--store", s(store), "--out", s(&back), s(released)])).map_err(|e| ctx("reid", e))?;
    check(fs::read(&restored).unwrap() == input, || {
        ctx("reid", "output differs from input".into())
    })?;
    fs::remove_file(&restored).unwrap();

    let epoch =
        ok(&run(&["rotate", "--store", s(store), "--columns", "patient,name"])).map_err(|e| ctx("rotate", e))?;
    check(epoch.trim() == "2", || ctx("rotate", format!("printed {epoch:?}")))?;
    let stale = run(&["reid", "--store", s(store), "--out", s(&back), s(released)]);
    let stderr = String::from_utf8_lossy(&stale.stderr);
    check(
        stale.status.code() == Some(2) && stderr.starts_with("EPOCH_MISMATCH: "),
        || ctx("reid after rotate", format!("exit {:?} {stderr}", stale.status.code())),
    )?;
    ok(&run(&[
        "reid",
        "--store",
        s(store),
        "--out",
        s(&back),
        "--epoch",
        "1",
        s(released),
    ]))
    .map_err(|e| ctx("reid --epoch 1", e))?;
    check(fs::read(&restored).unwrap() == input, || {
        ctx("reid --epoch 1", "output differs from input".into())
    })
}

/// Plain substring scan of every file written to the release directory.
fn leakage(case: usize, mode: &str, out: &Path, g: &Generated) -> Result<(), String> {
    let originals: BTreeSet<&str> = g
        .rows
        .iter()
        .flat_map(|r| IDENTIFYING.iter().map(move |&c| r[c].as_str()))
        .filter(|v| v.chars().count() >= 4)
        .collect();
    for entry in fs::read_dir(out).unwrap() {
        let path = entry.unwrap().path();
        let text = String::from_utf8(fs::read(&path).unwrap()).map_err(|_| format!("{} not UTF-8", path.display()))?;
        for o in &originals {
            check(!text.contains(o), || {
                format!(
                    "case {case} {mode}: `{o}` found in {}",
                    path.file_name().unwrap().to_string_lossy()
                )
            })?;
        }
    }
    Ok(())
}

fn linkage(case: usize, released: &Path, g: &Generated) -> Result<(), String> {
    let (_, rows) = read_csv(released)?;
    let mut keys: Vec<Vec<usize>> = IDENTIFYING.iter().map(|&c| vec![c]).collect();
    keys.push(IDENTIFYING.to_vec());
    for key in keys {
        let pick = |r: &Vec<String>| key.iter().map(|&c| r[c].clone()).collect::<Vec<_>>();
        check(partition(&g.rows, pick) == partition(&rows, pick), || {
            format!("case {case}: partition on columns {key:?} differs")
        })?;
    }
    Ok(())
}

fn lint_fixture() -> Result<(), String> {
    let out = run(&[
        "lint",
        "--schema",
        s(&fixture("lint10.schema")),
        "--vocab",
        s(&fixture("conditions.vocab")),
        "--config",
        s(&fixture("lint10.config")),
        "--format",
        "csv",
        s(&fixture("lint10.csv")),
    ]);
    check(out.status.code() == Some(1), || {
        format!("lint exit {:?}", out.status.code())
    })?;
    let rows: Vec<(String, String, String)> = csv::Reader::from_reader(&out.stdout[..])
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_owned(), rec[1].to_owned(), rec[3].to_owned())
        })
        .collect();
    let count = rows.len();
    let found: BTreeSet<_> = rows.into_iter().collect();
    let want: BTreeSet<(String, String, String)> = [
        ("2", "R1", "Condition"),
        ("5", "R2", "Note"),
        ("6", "R3", "Weight kg"),
        ("8", "R4", "Systolic"),
        ("9", "R5", "Sig"),
    ]
    .into_iter()
    .map(|(a, b, c)| (a.into(), b.into(), c.into()))
    .collect();
    check(found == want && count == 5, || format!("{count} findings: {found:?}"))
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn determinism() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for i in 0..2 {
        let work = dir.path().join(format!("run{i}"));
        ok(&run(&[
            "pseudo",
            "--schema",
            s(&fixture("visits.schema")),
            "--policy",
            s(&fixture("per_entity.policy")),
            "--store",
            s(&work.join("store")),
            "--out",
            s(&work.join("release")),
            "--seed",
            "42",
            s(&fixture("visits.csv")),
        ]))?;
        runs.push((tree(&work.join("release")), tree(&work.join("store"))));
    }
    check(runs[0].0.len() == 2, || format!("release files {:?}", runs[0].0.keys()))?;
    check(runs[0].1.len() >= 4, || format!("store files {:?}", runs[0].1.keys()))?;
    check(runs[0].0 == runs[1].0, || "releases or manifests differ".into())?;
    check(runs[0].1 == runs[1].1, || "store files differ".into())
}

fn children_peak_rss_bytes() -> u64 {
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    // SAFETY: getrusage only writes into the struct we pass.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_CHILDREN, &mut usage) };
    assert_eq!(rc, 0);
    usage.ru_maxrss as u64 * 1024
}

fn scale() -> Result<(), String> {
    const ROWS: usize = 1_000_000;
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("million.csv");
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let his: Vec<String> = (0..200_000u32)
        .map(|i| {
            generate_hi("800123", &format!("{:09}", i * 4999 % 1_000_000_000))
                .unwrap()
                .to_string()
        })
        .collect();
    const CONDITIONS: [&str; 3] = ["CD", "MH", "CKD"];
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&input)
            .unwrap();
        w.write_record(["Healthcare Identifier", "Medication", "Date", "Condition", "Name"])
            .unwrap();
        for i in 0..ROWS {
            let p = rng.random_range(0..his.len());
            w.write_record([
                his[p].as_str(),
                ["Insulin", "Dapotum", "Thalitone"][i % 3],
                &format!("{:02}-{:02}-2014", i % 28 + 1, i % 12 + 1),
                CONDITIONS[i % 3],
                &format!("Patient {p:06}"),
            ])
            .unwrap();
        }
        w.flush().unwrap();
    }

    let started = Instant::now();
    ok(&run(&[
        "pseudo",
        "--schema",
        s(&fixture("visits.schema")),
        "--policy",
        s(&fixture("per_entity.policy")),
        "--store",
        s(&dir.path().join("store")),
        "--out",
        s(&dir.path().join("release")),
        "--seed",
        "7",
        s(&input),
    ]))?;
    let elapsed = started.elapsed();
    let rss = children_peak_rss_bytes();
    println!(
        "  scale: {ROWS} rows in {:.2} s, peak RSS of child processes {} MiB",
        elapsed.as_secs_f64(),
        rss / (1 << 20)
    );
    let (_, rows) = read_csv(&dir.path().join("release/million.csv"))?;
    check(rows.len() == ROWS, || format!("{} rows released", rows.len()))?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    check(rss < 2 << 30, || format!("peak RSS {rss} bytes"))
}

fn store_integrity() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    ok(&run(&[
        "pseudo",
        "--schema",
        s(&fixture("lint10.schema")),
        "--policy",
        s(&fixture("lint10.policy")),
        "--store",
        s(&store),
        "--out",
        s(&dir.path().join("release")),
        "--seed",
        "9",
        s(&fixture("lint10.csv")),
    ]))?;
    ok(&run(&["rotate", "--store", s(&store), "--columns", "Name"]))?;
    let table = fs::read_dir(&store)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("name-"))
        .ok_or("no table file for Name")?;
    let pristine = fs::read(&table).unwrap();
    let cred = Credential::new(SECRET).unwrap();
    open_store(&store, &cred, Access::Read).map_err(|e| format!("pristine store: {e}"))?;

    let mut rng = ChaCha20Rng::seed_from_u64(99);
    for _ in 0..100 {
        let pos = rng.random_range(0..pristine.len());
        let mut bytes = pristine.clone();
        bytes[pos] ^= rng.random_range(1..=255u8);
        fs::write(&table, &bytes).unwrap();
        match open_store(&store, &cred, Access::Read) {
            Err(e) if e.code() == "CORRUPT" => {}
            Err(e) => return Err(format!("byte {pos}: {} instead of CORRUPT", e.code())),
            Ok(_) => return Err(format!("byte {pos}: flip not detected")),
        }
    }
    fs::write(&table, &pristine).unwrap();
    open_store(&store, &cred, Access::Read).map_err(|e| format!("restored store: {e}"))?;
    Ok(())
}

fn guarded(f: impl FnOnce() -> Result<(), String>) -> Result<(), String> {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let mut results: Vec<(u8, &str, Result<(), String>)> = vec![
        (1, "worked example", guarded(worked_example)),
        (2, "Luhn conformance", guarded(luhn_conformance)),
    ];
    let corpus = panic::catch_unwind(corpus).unwrap_or_else(|_| CorpusResult {
        roundtrip: Err("corpus run panicked".into()),
        leakage: Err("corpus run panicked".into()),
        linkage: Err("corpus run panicked".into()),
    });
    results.push((3, "round trip across rotation", corpus.roundtrip));
    results.push((4, "non-leakage", corpus.leakage));
    results.push((5, "per-entity linkage preservation", corpus.linkage));
    results.push((6, "lint fixture", guarded(lint_fixture)));
    results.push((7, "seeded determinism", guarded(determinism)));
    results.push((8, "scale", guarded(scale)));
    results.push((9, "store integrity", guarded(store_integrity)));

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(()) => println!("PASS criterion {n}: {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {n}: {name}: {e}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
