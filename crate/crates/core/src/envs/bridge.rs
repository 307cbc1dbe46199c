//! Client for environments served over newline-delimited JSON on TCP.
//!
//! Requests are `{"cmd": "spec" | "reset" | "step" | "close", ...}`, one per
//! line, each answered by exactly one line. A reply of the form
//! `{"error": "..."}` is surfaced as [`EnvError::Remote`].

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{Env, EnvError, EnvSpec, StepResult, FELL_DOWN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeParams {
    /// `host:port` of the server.
    pub address: String,
    pub connect_timeout_ms: u64,
    /// Read timeout per reply; 0 waits forever.
    pub io_timeout_ms: u64,
}

impl Default for BridgeParams {
    fn default() -> Self {
        Self {
            address: "127.0.0.1:5555".into(),
            connect_timeout_ms: 5_000,
            io_timeout_ms: 60_000,
        }
    }
}

pub struct BridgeEnv {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    spec: EnvSpec,
    started: bool,
    finished: bool,
    closed: bool,
}

impl BridgeEnv {
    pub fn connect(address: &str) -> Result<Self, EnvError> {
        Self::connect_with(&BridgeParams {
            address: address.into(),
            ..BridgeParams::default()
        })
    }

    /// Opens the connection and fetches the environment spec.
    pub fn connect_with(params: &BridgeParams) -> Result<Self, EnvError> {
        let lost = |e: std::io::Error| EnvError::ConnectionLost(format!("{}: {e}", params.address));
        let addr = params
            .address
            .to_socket_addrs()
            .map_err(lost)?
            .next()
            .ok_or_else(|| EnvError::InvalidParams(format!("unresolvable address {}", params.address)))?;
        let stream = TcpStream::connect_timeout(&addr, Duration::from_millis(params.connect_timeout_ms.max(1)))
            .map_err(lost)?;
        let timeout = (params.io_timeout_ms > 0).then(|| Duration::from_millis(params.io_timeout_ms));
        stream.set_read_timeout(timeout).map_err(lost)?;
        stream.set_nodelay(true).map_err(lost)?;
        let writer = stream.try_clone().map_err(lost)?;
        let mut env = Self {
            reader: BufReader::new(stream),
            writer,
            spec: EnvSpec {
                obs_dim: 0,
                act_dim: 0,
                action_low: vec![],
                action_high: vec![],
                obs_low: None,
                obs_high: None,
                max_episode_steps: 1,
            },
            started: false,
            finished: false,
            closed: false,
        };
        let reply = env.request(&json!({"cmd": "spec"}))?;
        env.spec = parse_spec(&reply)?;
        Ok(env)
    }

    /// Sends `close` and shuts the connection down. Dropping the handle does
    /// the same on a best-effort basis.
    pub fn close(mut self) -> Result<(), EnvError> {
        self.send_close()
    }

    fn send_close(&mut self) -> Result<(), EnvError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        let mut line = json!({"cmd": "close"}).to_string();
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| EnvError::ConnectionLost(e.to_string()))?;
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
        Ok(())
    }

    fn request(&mut self, msg: &Value) -> Result<Map<String, Value>, EnvError> {
        if self.closed {
            return Err(EnvError::ConnectionLost("connection already closed".into()));
        }
        let mut line = msg.to_string();
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| EnvError::ConnectionLost(e.to_string()))?;
        let mut reply = String::new();
        let n = self
            .reader
            .read_line(&mut reply)
            .map_err(|e| EnvError::ConnectionLost(e.to_string()))?;
        if n == 0 {
            return Err(EnvError::ConnectionLost("server closed the connection".into()));
        }
        let value: Value = serde_json::from_str(reply.trim_end())
            .map_err(|e| EnvError::Protocol(format!("malformed reply {reply:?}: {e}")))?;
        let Value::Object(obj) = value else {
            return Err(EnvError::Protocol(format!("reply is not an object: {reply:?}")));
        };
        if let Some(err) = obj.get("error") {
            let text = err.as_str().map(str::to_owned).unwrap_or_else(|| err.to_string());
            return Err(EnvError::Remote(text));
        }
        Ok(obj)
    }

    fn state_field(&self, obj: &Map<String, Value>) -> Result<Vec<f64>, EnvError> {
        let state = float_array(obj, "state")?;
        if state.len() != self.spec.obs_dim {
            return Err(EnvError::DimensionMismatch {
                what: "remote state",
                expected: self.spec.obs_dim,
                got: state.len(),
            });
        }
        Ok(state)
    }
}

impl Drop for BridgeEnv {
    fn drop(&mut self) {
        let _ = self.send_close();
    }
}

impl Env for BridgeEnv {
    fn name(&self) -> &str {
        "bridge"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        let reply = self.request(&json!({"cmd": "reset", "seed": seed}))?;
        let state = self.state_field(&reply)?;
        self.started = true;
        self.finished = false;
        Ok(state)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        if action.len() != self.spec.act_dim {
            return Err(EnvError::DimensionMismatch {
                what: "action",
                expected: self.spec.act_dim,
                got: action.len(),
            });
        }
        let mut a = action.to_vec();
        self.spec.clip_action(&mut a);
        let reply = self.request(&json!({"cmd": "step", "action": a}))?;
        let next_state = self.state_field(&reply)?;
        let reward = number(&reply, "reward")?;
        let done = flag(&reply, "done")?.unwrap_or(false);
        let timeout = flag(&reply, "timeout")?.unwrap_or(false);
        let fell_down = flag(&reply, "fell_down")?.unwrap_or(false);
        self.finished = done;
        let mut info = BTreeMap::new();
        if done {
            info.insert(FELL_DOWN.to_string(), fell_down);
        }
        Ok(StepResult {
            next_state,
            reward,
            done,
            done_is_timeout: done && timeout,
            info,
        })
    }
}

fn number(obj: &Map<String, Value>, key: &str) -> Result<f64, EnvError> {
    obj.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| EnvError::Protocol(format!("missing or non-numeric field {key:?}")))
}

fn count(obj: &Map<String, Value>, key: &str) -> Result<usize, EnvError> {
    let v = number(obj, key)?;
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(EnvError::Protocol(format!("field {key:?} is not a count: {v}")));
    }
    Ok(v as usize)
}

fn flag(obj: &Map<String, Value>, key: &str) -> Result<Option<bool>, EnvError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Bool(b)) => Ok(Some(*b)),
        Some(other) => Err(EnvError::Protocol(format!("field {key:?} is not a bool: {other}"))),
    }
}

fn float_array(obj: &Map<String, Value>, key: &str) -> Result<Vec<f64>, EnvError> {
    let arr = obj
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| EnvError::Protocol(format!("missing array field {key:?}")))?;
    arr.iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| EnvError::Protocol(format!("non-numeric entry in {key:?}: {v}")))
        })
        .collect()
}

fn parse_spec(obj: &Map<String, Value>) -> Result<EnvSpec, EnvError> {
    let optional = |key: &str| -> Result<Option<Vec<f64>>, EnvError> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(_) => float_array(obj, key).map(Some),
        }
    };
    let spec = EnvSpec {
        obs_dim: count(obj, "obs_dim")?,
        act_dim: count(obj, "act_dim")?,
        action_low: float_array(obj, "action_low")?,
        action_high: float_array(obj, "action_high")?,
        obs_low: optional("obs_low")?,
        obs_high: optional("obs_high")?,
        max_episode_steps: count(obj, "max_steps")?,
    };
    if spec.obs_dim == 0 || spec.act_dim == 0 {
        return Err(EnvError::Protocol("spec declares a zero dimension".into()));
    }
    spec.validate().map_err(|e| EnvError::Protocol(format!("invalid spec: {e}")))?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;
    use std::thread;

    /// Scripted server: answers each request through `handler` until it
    /// returns `None` or the client hangs up.
    fn serve<F>(handler: F) -> (String, thread::JoinHandle<Vec<Value>>)
    where
        F: FnMut(&Value) -> Option<String> + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let handle = thread::spawn(move || {
            let mut handler = handler;
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut writer = stream;
            let mut seen = Vec::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let msg: Value = serde_json::from_str(&line).unwrap();
                seen.push(msg.clone());
                if msg["cmd"] == "close" {
                    break;
                }
                match handler(&msg) {
                    Some(reply) => {
                        writer.write_all(reply.as_bytes()).unwrap();
                        writer.write_all(b"\n").unwrap();
                    }
                    None => break,
                }
            }
            seen
        });
        (addr, handle)
    }

    const SPEC: &str = r#"{"obs_dim": 3.0, "act_dim": 2, "action_low": [-1, -1], "action_high": [1, 1], "max_steps": 1000, "extra": "ignored"}"#;

    /// A counter environment: the state is (t, last action).
    fn counter(msg: &Value, t: &mut usize) -> Option<String> {
        Some(match msg["cmd"].as_str()? {
            "spec" => SPEC.into(),
            "reset" => {
                *t = 0;
                let seed = msg["seed"].as_f64()?;
                json!({"state": [0.0, seed, 0.0]}).to_string()
            }
            "step" => {
                *t += 1;
                let a = msg["action"].as_array()?;
                let done = *t >= 1000;
                json!({"state": [*t as f64, a[0], a[1]], "reward": -1.0,
                       "done": done, "timeout": done, "fell_down": false})
                .to_string()
            }
            _ => return None,
        })
    }

    #[test]
    fn spec_is_taken_from_the_server() {
        let (addr, server) = serve(|m| counter(m, &mut 0));
        let env = BridgeEnv::connect(&addr).unwrap();
        assert_eq!(env.spec().obs_dim, 3);
        assert_eq!(env.spec().act_dim, 2);
        assert_eq!(env.spec().max_episode_steps, 1000);
        assert_eq!(env.spec().action_high, vec![1.0, 1.0]);
        env.close().unwrap();
        let seen = server.join().unwrap();
        assert_eq!(seen.last().unwrap()["cmd"], "close");
    }

    #[test]
    fn thousand_step_loopback_episode() {
        let mut t = 0;
        let (addr, server) = serve(move |m| counter(m, &mut t));
        let mut env = BridgeEnv::connect(&addr).unwrap();
        assert_eq!(env.reset(7).unwrap(), vec![0.0, 7.0, 0.0]);
        let mut steps = 0;
        loop {
            let a = [0.001 * steps as f64, -0.5];
            let r = env.step(&a).unwrap();
            steps += 1;
            assert_eq!(r.next_state, vec![steps as f64, a[0], -0.5]);
            if r.done {
                assert!(r.done_is_timeout && !r.fell_down());
                break;
            }
        }
        assert_eq!(steps, 1000);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(EnvError::EpisodeOver)));
        drop(env);
        assert_eq!(server.join().unwrap().len(), 1 + 1 + 1000 + 1);
    }

    #[test]
    fn wrong_action_dim_is_rejected_before_sending() {
        let (addr, server) = serve(|m| counter(m, &mut 0));
        let mut env = BridgeEnv::connect(&addr).unwrap();
        env.reset(0).unwrap();
        assert!(matches!(
            env.step(&[0.0, 0.0, 0.0]),
            Err(EnvError::DimensionMismatch { expected: 2, got: 3, .. })
        ));
        env.close().unwrap();
        let seen = server.join().unwrap();
        assert!(seen.iter().all(|m| m["cmd"] != "step"));
    }

    #[test]
    fn step_before_reset_is_rejected() {
        let (addr, _server) = serve(|m| counter(m, &mut 0));
        let mut env = BridgeEnv::connect(&addr).unwrap();
        assert!(matches!(env.step(&[0.0, 0.0]), Err(EnvError::NotReset)));
    }

    #[test]
    fn remote_errors_and_malformed_replies_are_typed() {
        let (addr, _server) = serve(|m| {
            Some(match m["cmd"].as_str()? {
                "spec" => SPEC.into(),
                "reset" => r#"{"error": "env crashed"}"#.into(),
                _ => "not json".into(),
            })
        });
        let mut env = BridgeEnv::connect(&addr).unwrap();
        match env.reset(1) {
            Err(EnvError::Remote(msg)) => assert_eq!(msg, "env crashed"),
            other => panic!("expected remote error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_step_reply_is_a_protocol_error() {
        let (addr, _server) = serve(|m| {
            Some(match m["cmd"].as_str()? {
                "spec" => SPEC.into(),
                "reset" => r#"{"state": [0, 0, 0]}"#.into(),
                _ => "{\"state\": [0, 0".into(),
            })
        });
        let mut env = BridgeEnv::connect(&addr).unwrap();
        env.reset(0).unwrap();
        assert!(matches!(env.step(&[0.0, 0.0]), Err(EnvError::Protocol(_))));
    }

    #[test]
    fn wrong_state_length_is_a_dimension_mismatch() {
        let (addr, _server) = serve(|m| {
            Some(match m["cmd"].as_str()? {
                "spec" => SPEC.into(),
                _ => r#"{"state": [0, 0]}"#.into(),
            })
        });
        let mut env = BridgeEnv::connect(&addr).unwrap();
        assert!(matches!(
            env.reset(0),
            Err(EnvError::DimensionMismatch { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn server_hangup_is_connection_lost() {
        let (addr, _server) = serve(|m| match m["cmd"].as_str()? {
            "spec" => Some(SPEC.into()),
            _ => None,
        });
        let mut env = BridgeEnv::connect(&addr).unwrap();
        assert!(matches!(env.reset(0), Err(EnvError::ConnectionLost(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            r#"{"obs_dim": 2.5, "act_dim": 1, "action_low": [-1], "action_high": [1], "max_steps": 10}"#,
            r#"{"obs_dim": 2, "act_dim": 2, "action_low": [-1], "action_high": [1], "max_steps": 10}"#,
            r#"{"obs_dim": 2, "act_dim": 1, "action_low": [1], "action_high": [-1], "max_steps": 10}"#,
            r#"{"act_dim": 1, "action_low": [-1], "action_high": [1], "max_steps": 10}"#,
        ] {
            let reply = bad.to_string();
            let (addr, _server) = serve(move |_| Some(reply.clone()));
            let err = BridgeEnv::connect(&addr).err().expect("spec must be rejected");
            assert!(
                matches!(err, EnvError::Protocol(_) | EnvError::DimensionMismatch { .. }),
                "{err:?}"
            );
        }
    }

    #[test]
    fn unreachable_server_is_connection_lost() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        assert!(matches!(BridgeEnv::connect(&addr), Err(EnvError::ConnectionLost(_))));
    }
}
