//! Shared helpers for line-delimited JSON parsing errors.

/// Human-readable serde detail with backticks and the redundant single-line
/// position suffix stripped; callers prefix the real line number.
pub(crate) fn serde_detail(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    let msg = match msg.rfind(" at line ") {
        Some(pos) => &msg[..pos],
        None => &msg,
    };
    msg.replace('`', "")
}
