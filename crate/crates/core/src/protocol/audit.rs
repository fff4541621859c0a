//! Finds image payloads inside encoded frames, whatever field they hide in.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::Value;

/// Where teacher-bound frames may carry images: board thumbnails and roster
/// avatars, on their own or inside a `joined` snapshot.
pub const TEACHER_IMAGE_PATHS: &[&str] = &[
    "rows[].thumbnail",
    "players[].avatar",
    "snapshot.board.rows[].thumbnail",
    "snapshot.roster[].avatar",
];

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";
const JPEG_MAGIC: &[u8] = &[0xFF, 0xD8, 0xFF];

fn is_image(text: &str) -> bool {
    // 12 base64 characters cover the longest magic number
    if text.len() < 12 {
        return false;
    }
    let Ok(head) = STANDARD.decode(&text[..12]) else {
        return false;
    };
    (head.starts_with(PNG_MAGIC) || head.starts_with(JPEG_MAGIC)) && STANDARD.decode(text).is_ok()
}

fn walk(value: &Value, path: &mut String, found: &mut Vec<String>) {
    match value {
        Value::String(s) if is_image(s) => found.push(path.clone()),
        Value::Array(items) => {
            let len = path.len();
            path.push_str("[]");
            for item in items {
                walk(item, path, found);
            }
            path.truncate(len);
        }
        Value::Object(map) => {
            for (k, v) in map {
                let len = path.len();
                if !path.is_empty() {
                    path.push('.');
                }
                path.push_str(k);
                walk(v, path, found);
                path.truncate(len);
            }
        }
        _ => {}
    }
}

/// Paths (array indices written as `[]`) of every base64 string that decodes
/// to a PNG or JPEG. Frames that are not JSON yield no paths.
pub fn image_paths(frame: &[u8]) -> Vec<String> {
    let Ok(value) = serde_json::from_slice::<Value>(frame) else {
        return Vec::new();
    };
    let mut found = Vec::new();
    walk(&value, &mut String::new(), &mut found);
    found.sort();
    found.dedup();
    found
}

/// Checks a teacher-bound frame carries images only where they are allowed.
pub fn audit_teacher_frame(frame: &[u8]) -> Result<(), Vec<String>> {
    let stray: Vec<String> = image_paths(frame)
        .into_iter()
        .filter(|p| !TEACHER_IMAGE_PATHS.contains(&p.as_str()))
        .collect();
    if stray.is_empty() {
        Ok(())
    } else {
        Err(stray)
    }
}

/// Replaces every image payload in `value` with a short placeholder such as
/// `"<png 1234 bytes>"`, for logs and transcripts.
pub fn redact_images(value: &mut Value) {
    match value {
        Value::String(s) if is_image(s) => {
            let bytes = STANDARD.decode(s.as_bytes()).map(|b| b.len()).unwrap_or(0);
            let kind = if s.starts_with("iVBOR") { "png" } else { "jpeg" };
            *s = format!("<{kind} {bytes} bytes>");
        }
        Value::Array(items) => items.iter_mut().for_each(redact_images),
        Value::Object(map) => map.values_mut().for_each(redact_images),
        _ => {}
    }
}
