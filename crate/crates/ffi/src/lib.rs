//! C ABI for prosody-lab.
//!
//! Every function returns a `PlStatus`; results go through out-pointers.
//! Objects are opaque handles created by `pl_*_new` / `pl_*_load` and
//! released by the matching `pl_*_free`. After a non-`PL_OK` status,
//! `pl_last_error` copies a description of the failure on this thread.
//!
//! Strings are NUL-terminated UTF-8. Functions that write a string take a
//! buffer and its capacity and report the required size (including the NUL)
//! through `needed`; a short buffer yields `PL_ERR_BUFFER_TOO_SMALL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use prosody_lab::elo::{EloConfig, RatingTable, VoteRecord, Winner, VOTE_SCHEMA_VERSION};
use prosody_lab::eval::{self, EvalSpec};
use prosody_lab::policy::{read_checkpoint, write_checkpoint, PolicyParams};
use prosody_lab::reward::{self, Metrics, RewardWeights, Temperatures};
use prosody_lab::scenario::{EnvSpec, Scenario};

/// Result code of every call.
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlStatus {
    PL_OK = 0,
    PL_ERR_NULL = 1,
    PL_ERR_INVALID_ARGUMENT = 2,
    PL_ERR_UTF8 = 3,
    PL_ERR_IO = 4,
    PL_ERR_CHECKPOINT = 5,
    PL_ERR_UNKNOWN_SYSTEM = 6,
    PL_ERR_BUFFER_TOO_SMALL = 7,
    PL_ERR_PANIC = 8,
}

use PlStatus::*;

/// Environment preset for `pl_scenario_new`.
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlEnvPreset {
    PL_ENV_STANDARD = 0,
    PL_ENV_HACKABLE = 1,
}

/// Held-out evaluation statistics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlEvalSummary {
    pub n: usize,
    pub mean_cer: f64,
    pub std_logf0: f64,
    pub nonterm_rate: f64,
    pub mean_len: f64,
    pub mean_sim: f64,
}

/// Built environment: vocabulary, prompt pools and base checkpoint.
pub struct PlScenario(Scenario);

/// Policy checkpoint.
pub struct PlPolicy(PolicyParams);

/// ELO rating table.
pub struct PlRatingTable {
    table: RatingTable,
    next_vote: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Fail(PlStatus, String);

impl Fail {
    fn new(status: PlStatus, msg: impl std::fmt::Display) -> Self {
        Self(status, msg.to_string())
    }
}

type Res<T> = Result<T, Fail>;

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

/// Runs `f`, recording the error message and converting panics.
fn guard(f: impl FnOnce() -> Res<()>) -> PlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PL_OK
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_owned())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            PL_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Res<&'a str> {
    if p.is_null() {
        return Err(Fail::new(PL_ERR_NULL, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail::new(PL_ERR_UTF8, format!("{name}: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Res<&'a mut T> {
    p.as_mut().ok_or_else(|| Fail::new(PL_ERR_NULL, format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Res<&'a T> {
    p.as_ref().ok_or_else(|| Fail::new(PL_ERR_NULL, format!("{name} is null")))
}

unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Res<()> {
    let n = s.len() + 1;
    if let Some(nd) = needed.as_mut() {
        *nd = n;
    }
    if buf.is_null() || cap < n {
        return Err(Fail::new(PL_ERR_BUFFER_TOO_SMALL, format!("need {n} bytes, have {cap}")));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

fn invalid(e: impl std::fmt::Display) -> Fail {
    Fail::new(PL_ERR_INVALID_ARGUMENT, e)
}

/// Copies the calling thread's last error message into `buf`.
///
/// # Safety
/// `buf` must be writable for `cap` bytes or null; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn pl_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> PlStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_str(&msg, buf, cap, needed) {
        Ok(()) => PL_OK,
        Err(Fail(s, _)) => s,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Character error rate of `hypothesis` against `reference`.
///
/// # Safety
/// Both strings must be valid NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pl_cer(reference: *const c_char, hypothesis: *const c_char, out: *mut f64) -> PlStatus {
    guard(|| {
        let r = str_arg(reference, "reference")?;
        let h = str_arg(hypothesis, "hypothesis")?;
        *out_arg(out, "out")? = reward::cer(r, h).map_err(invalid)?;
        Ok(())
    })
}

/// Harmonic-mean reward of one candidate's metrics.
///
/// With `has_sim` false the two-term reward is used and `sim`, `lambda_s`
/// are ignored.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pl_reward(
    cer: f64,
    nll: f64,
    sim: f64,
    has_sim: bool,
    lambda_c: f64,
    lambda_ell: f64,
    lambda_s: f64,
    tau_c: f64,
    tau_ell: f64,
    sim_floor: f64,
    out: *mut f64,
) -> PlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let weights = if has_sim {
            RewardWeights::three_term(lambda_c, lambda_ell, lambda_s)
        } else {
            RewardWeights::two_term(lambda_c, lambda_ell)
        }
        .map_err(invalid)?;
        let temps = Temperatures::new(tau_c, tau_ell).map_err(invalid)?;
        let m = Metrics::new(cer, nll, has_sim.then_some(sim)).map_err(invalid)?;
        *out = reward::reward(&m, &weights, &temps, sim_floor).map_err(invalid)?;
        Ok(())
    })
}

/// Builds an environment preset with its base checkpoint.
///
/// # Safety
/// `out` must be writable; free the result with `pl_scenario_free`.
#[no_mangle]
pub unsafe extern "C" fn pl_scenario_new(preset: PlEnvPreset, out: *mut *mut PlScenario) -> PlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = match preset {
            PlEnvPreset::PL_ENV_STANDARD => EnvSpec::default(),
            PlEnvPreset::PL_ENV_HACKABLE => EnvSpec::hackable(),
        };
        let s = Scenario::build(&spec).map_err(invalid)?;
        *out = Box::into_raw(Box::new(PlScenario(s)));
        Ok(())
    })
}

/// # Safety
/// `s` must come from `pl_scenario_new` and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pl_scenario_free(s: *mut PlScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of training and held-out prompts.
///
/// # Safety
/// `s` must be a live scenario; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn pl_scenario_sizes(s: *const PlScenario, n_train: *mut usize, n_heldout: *mut usize) -> PlStatus {
    guard(|| {
        let s = &handle(s, "scenario")?.0;
        *out_arg(n_train, "n_train")? = s.train.len();
        *out_arg(n_heldout, "n_heldout")? = s.heldout.len();
        Ok(())
    })
}

/// A copy of the scenario's base checkpoint.
///
/// # Safety
/// `s` must be a live scenario; free the result with `pl_policy_free`.
#[no_mangle]
pub unsafe extern "C" fn pl_scenario_base_policy(s: *const PlScenario, out: *mut *mut PlPolicy) -> PlStatus {
    guard(|| {
        let s = &handle(s, "scenario")?.0;
        *out_arg(out, "out")? = Box::into_raw(Box::new(PlPolicy(s.base.clone())));
        Ok(())
    })
}

/// Reads a checkpoint file.
///
/// # Safety
/// `path` must be a valid string; free the result with `pl_policy_free`.
#[no_mangle]
pub unsafe extern "C" fn pl_policy_load(path: *const c_char, out: *mut *mut PlPolicy) -> PlStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let p = read_checkpoint(Path::new(path)).map_err(|e| match e {
            prosody_lab::policy::PolicyError::Io(io) => Fail::new(PL_ERR_IO, io),
            other => Fail::new(PL_ERR_CHECKPOINT, other),
        })?;
        *out = Box::into_raw(Box::new(PlPolicy(p)));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `p` must be a live policy and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn pl_policy_save(p: *const PlPolicy, path: *const c_char) -> PlStatus {
    guard(|| {
        let p = &handle(p, "policy")?.0;
        let path = str_arg(path, "path")?;
        write_checkpoint(Path::new(path), p).map_err(|e| Fail::new(PL_ERR_IO, e))
    })
}

/// # Safety
/// `p` must come from a `pl_policy_*` constructor and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pl_policy_free(p: *mut PlPolicy) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Hex sha256 of the checkpoint encoding (64 characters plus NUL).
///
/// # Safety
/// `p` must be a live policy; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn pl_policy_hash(p: *const PlPolicy, buf: *mut c_char, cap: usize, needed: *mut usize) -> PlStatus {
    guard(|| write_str(&handle(p, "policy")?.0.hash(), buf, cap, needed))
}

/// Version string stored in the checkpoint.
///
/// # Safety
/// `p` must be a live policy; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn pl_policy_version(p: *const PlPolicy, buf: *mut c_char, cap: usize, needed: *mut usize) -> PlStatus {
    guard(|| write_str(handle(p, "policy")?.0.version(), buf, cap, needed))
}

/// Samples `samples_per_prompt` candidates per held-out prompt and
/// summarizes them.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pl_policy_evaluate(
    p: *const PlPolicy,
    s: *const PlScenario,
    samples_per_prompt: usize,
    temperature: f64,
    seed: u64,
    out: *mut PlEvalSummary,
) -> PlStatus {
    guard(|| {
        let p = &handle(p, "policy")?.0;
        let s = &handle(s, "scenario")?.0;
        let out = out_arg(out, "out")?;
        if samples_per_prompt == 0 || !(temperature.is_finite() && temperature > 0.0) {
            return Err(invalid("samples_per_prompt must be >= 1 and temperature positive"));
        }
        let spec = EvalSpec {
            samples_per_prompt,
            temperature,
            max_len: s.spec.max_len,
            seed,
        };
        let e = eval::evaluate(p, s.heldout.as_slice(), &s.vocab, &spec).map_err(invalid)?;
        *out = PlEvalSummary {
            n: e.n,
            mean_cer: e.mean_cer,
            std_logf0: e.std_logf0,
            nonterm_rate: e.nonterm_rate,
            mean_len: e.mean_len,
            mean_sim: e.mean_sim,
        };
        Ok(())
    })
}

/// Empty rating table.
///
/// # Safety
/// `out` must be writable; free the result with `pl_elo_free`.
#[no_mangle]
pub unsafe extern "C" fn pl_elo_new(k_factor: f64, initial_rating: f64, out: *mut *mut PlRatingTable) -> PlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = EloConfig { k_factor, initial_rating };
        let table = RatingTable::new::<&str>(&[], &cfg).map_err(invalid)?;
        *out = Box::into_raw(Box::new(PlRatingTable { table, next_vote: 0 }));
        Ok(())
    })
}

/// # Safety
/// `t` must come from `pl_elo_new` and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pl_elo_free(t: *mut PlRatingTable) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Adds a system at the initial rating; registering twice is a no-op.
///
/// # Safety
/// `t` must be a live table and `system` a valid string.
#[no_mangle]
pub unsafe extern "C" fn pl_elo_register(t: *mut PlRatingTable, system: *const c_char) -> PlStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| Fail::new(PL_ERR_NULL, "table is null"))?;
        t.table.register(str_arg(system, "system")?);
        Ok(())
    })
}

/// Applies one vote; `delta` (nullable) receives the points transferred.
///
/// # Safety
/// `t` must be a live table and the strings valid.
#[no_mangle]
pub unsafe extern "C" fn pl_elo_vote(
    t: *mut PlRatingTable,
    system_a: *const c_char,
    system_b: *const c_char,
    a_wins: bool,
    delta: *mut f64,
) -> PlStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| Fail::new(PL_ERR_NULL, "table is null"))?;
        let vote = VoteRecord {
            schema_version: VOTE_SCHEMA_VERSION,
            vote_id: format!("ffi-{}", t.next_vote),
            system_a: str_arg(system_a, "system_a")?.to_owned(),
            system_b: str_arg(system_b, "system_b")?.to_owned(),
            winner: if a_wins { Winner::A } else { Winner::B },
            annotator_id: String::new(),
            timestamp: t.next_vote,
            prompt_id: String::new(),
        };
        let d = t.table.apply_vote(&vote).map_err(|e| match e {
            prosody_lab::elo::EloError::UnknownSystem(_) => Fail::new(PL_ERR_UNKNOWN_SYSTEM, e),
            other => invalid(other),
        })?;
        t.next_vote += 1;
        if let Some(out) = delta.as_mut() {
            *out = d;
        }
        Ok(())
    })
}

/// Current rating of `system`.
///
/// # Safety
/// `t` must be a live table, `system` valid, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pl_elo_rating(t: *const PlRatingTable, system: *const c_char, out: *mut f64) -> PlStatus {
    guard(|| {
        let t = handle(t, "table")?;
        let name = str_arg(system, "system")?;
        *out_arg(out, "out")? = t
            .table
            .rating(name)
            .ok_or_else(|| Fail::new(PL_ERR_UNKNOWN_SYSTEM, format!("unknown system {name:?}")))?;
        Ok(())
    })
}

/// Leaderboard as `system,rating,n_votes` CSV.
///
/// # Safety
/// `t` must be a live table; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn pl_elo_leaderboard_csv(t: *const PlRatingTable, buf: *mut c_char, cap: usize, needed: *mut usize) -> PlStatus {
    guard(|| {
        let t = handle(t, "table")?;
        write_str(&prosody_lab::elo::leaderboard_csv(&t.table.leaderboard()), buf, cap, needed)
    })
}
