//! Scenario scripts: one step per line, `verb key=value ...`, `#` comments.
//!
//! ```text
//! teacher                               # connect the teacher
//! join count=8 prefix=student           # student-1 .. student-8
//! join name=Ada avatar=frames/ada.png
//! challenge label=bright                # or players=Ada,student-2
//! submit player=student-1 image=frames/a.png
//! submit player=* image=frames/grey.png expect=E_PAUSED
//! pause | resume | reveal n=2 | reveal n=hidden
//! heatmap on=true | dataset on=true | regenerate
//! settle | check | wait ms=200 | disconnect player=Ada
//! end
//! ```
//!
//! Paths are relative to the scenario file. Every teacher command and
//! `submit` accept `expect=E_CODE` to require that error instead of success.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use bm_core::session::Reveal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("scenario line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Player(String),
    AllStudents,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherOp {
    /// Label by name or index; no players means everyone.
    Challenge { label: String, players: Vec<String> },
    Pause(bool),
    Reveal(Reveal),
    Heatmap(bool),
    Dataset(bool),
    Regenerate,
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Teacher,
    Join { names: Vec<String>, avatar: Option<PathBuf> },
    Submit { target: Target, image: PathBuf, expect: Option<String> },
    Teach { op: TeacherOp, expect: Option<String> },
    Settle,
    Check,
    Wait(Duration),
    Disconnect(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub line: usize,
    pub text: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub steps: Vec<Step>,
}

struct Args {
    line: usize,
    map: BTreeMap<String, String>,
}

impl Args {
    fn err(&self, message: impl Into<String>) -> ScenarioError {
        ScenarioError {
            line: self.line,
            message: message.into(),
        }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn need(&mut self, key: &str) -> Result<String, ScenarioError> {
        self.take(key).ok_or_else(|| self.err(format!("missing {key}=")))
    }

    fn flag(&mut self, key: &str) -> Result<bool, ScenarioError> {
        match self.need(key)?.as_str() {
            "true" | "on" | "yes" => Ok(true),
            "false" | "off" | "no" => Ok(false),
            other => Err(self.err(format!("{key}={other} is not a boolean"))),
        }
    }

    fn path(&mut self, key: &str, base: &Path) -> Result<PathBuf, ScenarioError> {
        Ok(base.join(self.need(key)?))
    }

    fn finish(self) -> Result<(), ScenarioError> {
        match self.map.keys().next() {
            Some(k) => Err(self.err(format!("unknown argument {k}="))),
            None => Ok(()),
        }
    }
}

fn list(text: &str) -> Vec<String> {
    text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
}

/// Parses a scenario; relative paths resolve against `base`.
pub fn parse(text: &str, base: &Path) -> Result<Scenario, ScenarioError> {
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut words = content.split_whitespace();
        let verb = words.next().expect("non-empty line");
        let mut map = BTreeMap::new();
        for word in words {
            let (k, v) = word.split_once('=').ok_or_else(|| ScenarioError {
                line,
                message: format!("expected key=value, got {word:?}"),
            })?;
            if map.insert(k.to_owned(), v.to_owned()).is_some() {
                return Err(ScenarioError {
                    line,
                    message: format!("{k}= given twice"),
                });
            }
        }
        let mut args = Args { line, map };
        let expect = args.take("expect");
        let teach = |op| Action::Teach { op, expect: expect.clone() };
        let action = match verb {
            "teacher" => Action::Teacher,
            "join" => {
                let names = match (args.take("name"), args.take("count")) {
                    (Some(name), None) => vec![name],
                    (None, Some(count)) => {
                        let n: usize = count.parse().map_err(|_| args.err("count= must be a number"))?;
                        let prefix = args.take("prefix").unwrap_or_else(|| "player".into());
                        (1..=n).map(|i| format!("{prefix}-{i}")).collect()
                    }
                    _ => return Err(args.err("join needs exactly one of name= or count=")),
                };
                let avatar = args.take("avatar").map(|p| base.join(p));
                Action::Join { names, avatar }
            }
            "submit" => {
                let target = match args.need("player")?.as_str() {
                    "*" => Target::AllStudents,
                    name => Target::Player(name.to_owned()),
                };
                let image = args.path("image", base)?;
                Action::Submit {
                    target,
                    image,
                    expect: expect.clone(),
                }
            }
            "challenge" => {
                let label = args.need("label")?;
                let players = args.take("players").map(|p| list(&p)).unwrap_or_default();
                teach(TeacherOp::Challenge { label, players })
            }
            "pause" => teach(TeacherOp::Pause(true)),
            "resume" => teach(TeacherOp::Pause(false)),
            "reveal" => {
                let n = args.need("n")?;
                let reveal = n.parse::<Reveal>().map_err(|e| args.err(e))?;
                teach(TeacherOp::Reveal(reveal))
            }
            "heatmap" => teach(TeacherOp::Heatmap(args.flag("on")?)),
            "dataset" => teach(TeacherOp::Dataset(args.flag("on")?)),
            "regenerate" => teach(TeacherOp::Regenerate),
            "end" => teach(TeacherOp::End),
            "settle" => Action::Settle,
            "check" => Action::Check,
            "wait" => {
                let ms: u64 = args.need("ms")?.parse().map_err(|_| args.err("ms= must be a number"))?;
                Action::Wait(Duration::from_millis(ms))
            }
            "disconnect" => Action::Disconnect(args.need("player")?),
            other => return Err(args.err(format!("unknown step {other:?}"))),
        };
        if expect.is_some() && !matches!(action, Action::Submit { .. } | Action::Teach { .. }) {
            return Err(args.err("expect= only applies to submit and teacher commands"));
        }
        args.finish()?;
        steps.push(Step {
            line,
            text: content.to_owned(),
            action,
        });
    }
    Ok(Scenario { steps })
}
