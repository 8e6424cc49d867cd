use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use qshape_core::envs::{BuiltEnv, Layout};
use qshape_core::heuristics::scripted_guidance;
use qshape_core::mdp::EmpiricalDataset;
use qshape_core::oracle::QTable;
use qshape_core::qlearn::{train_seeded, GuidancePoll, GuidanceSet, ScheduledGuidance, TrainingHooks};
use qshape_core::runlog::{EventPayload, RunEvent, RunStatus, RunSummary};
use qshape_llm::{sanitize_guidance, LlmClient};
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Semaphore};

use crate::config::RunConfig;
use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVerb {
    Pause,
    Resume,
    Stop,
}

/// Latest Q-table of a run, for heatmaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTableSnapshot {
    pub run_id: String,
    pub step: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub cap: f64,
    /// Row-major, `values[s * n_actions + a]`.
    pub values: Vec<f64>,
    pub greedy: Vec<usize>,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub id: String,
    pub label: String,
    pub env: String,
    pub status: RunStatus,
    pub created_at: u64,
    pub step: u64,
    pub budget: u64,
    pub events: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latest_evaluation: Option<(u64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

struct RunState {
    status: RunStatus,
    events: Vec<RunEvent>,
    step: u64,
    q: Option<QTable>,
    summary: Option<RunSummary>,
    message: Option<String>,
    pause_requested: bool,
    stop_requested: bool,
    /// The worker has returned (or never will run).
    done: bool,
    jsonl: Option<File>,
}

pub struct Run {
    pub id: String,
    pub config: RunConfig,
    pub created_at: u64,
    env: BuiltEnv,
    state: Mutex<RunState>,
    wake: Condvar,
    /// Bumped on every event or status change.
    changes: watch::Sender<u64>,
    guidance_tx: mpsc::Sender<GuidanceSet>,
    guidance_rx: Mutex<Option<mpsc::Receiver<GuidanceSet>>>,
    next_guidance_id: AtomicU64,
    dir: Option<PathBuf>,
    /// Serializes run.json writes so the last write carries the newest state.
    persist: Mutex<()>,
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_json(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value).expect("serializes"))?;
    fs::rename(tmp, path)
}

impl Run {
    fn new(id: String, config: RunConfig, env: BuiltEnv, created_at: u64, dir: Option<PathBuf>) -> Self {
        let (guidance_tx, rx) = mpsc::channel();
        Run {
            id,
            config,
            created_at,
            env,
            state: Mutex::new(RunState {
                status: RunStatus::Pending,
                events: Vec::new(),
                step: 0,
                q: None,
                summary: None,
                message: None,
                pause_requested: false,
                stop_requested: false,
                done: false,
                jsonl: None,
            }),
            wake: Condvar::new(),
            changes: watch::channel(0).0,
            guidance_tx,
            guidance_rx: Mutex::new(Some(rx)),
            next_guidance_id: AtomicU64::new(1),
            dir,
            persist: Mutex::new(()),
        }
    }

    fn lock(&self) -> MutexGuard<'_, RunState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn bump(&self) {
        self.changes.send_modify(|n| *n += 1);
    }

    pub fn env(&self) -> &BuiltEnv {
        &self.env
    }

    pub fn status(&self) -> RunStatus {
        self.lock().status
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.changes.subscribe()
    }

    /// Events from `cursor` on, and whether no more will ever follow.
    pub fn events_from(&self, cursor: usize) -> (Vec<RunEvent>, bool) {
        let st = self.lock();
        let events = st.events.get(cursor..).map(<[_]>::to_vec).unwrap_or_default();
        (events, st.done)
    }

    pub fn events(&self) -> Vec<RunEvent> {
        self.lock().events.clone()
    }

    pub fn info(&self) -> RunInfo {
        let st = self.lock();
        let latest_evaluation = st.events.iter().rev().find_map(|e| match e.payload {
            EventPayload::Evaluation { mean_return, .. } => Some((e.step, mean_return)),
            _ => None,
        });
        RunInfo {
            id: self.id.clone(),
            label: self.config.label.clone(),
            env: self.config.env.name().to_string(),
            status: st.status,
            created_at: self.created_at,
            step: st.step,
            budget: self.config.budget,
            events: st.events.len(),
            latest_evaluation,
            summary: st.summary.clone(),
            message: st.message.clone(),
        }
    }

    pub fn qtable(&self) -> QTableSnapshot {
        let st = self.lock();
        let mdp = &self.env.mdp;
        let q = st.q.clone().unwrap_or_else(|| QTable::zeros(mdp.n_states, mdp.n_actions, mdp.cap()));
        QTableSnapshot {
            run_id: self.id.clone(),
            step: st.step,
            n_states: q.n_states(),
            n_actions: q.n_actions(),
            cap: q.cap(),
            greedy: (0..q.n_states()).map(|s| q.argmax(s)).collect(),
            values: q.values().to_vec(),
            layout: self.env.schema.layout.clone(),
        }
    }

    pub fn next_guidance_id(&self) -> u64 {
        self.next_guidance_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Queues guidance for the next step boundary.
    pub fn enqueue(&self, set: GuidanceSet) -> Result<(), ApiError> {
        let st = self.lock();
        if st.status.is_terminal() || st.stop_requested {
            return Err(ApiError::Conflict(format!("run {} is {}", self.id, st.status)));
        }
        self.guidance_tx
            .send(set)
            .map_err(|_| ApiError::Conflict(format!("run {} no longer accepts guidance", self.id)))
    }

    /// Applies a control verb and returns the status it leads to.
    pub fn control(&self, verb: ControlVerb) -> Result<RunStatus, ApiError> {
        let mut st = self.lock();
        let next = match (verb, st.status) {
            (ControlVerb::Pause, RunStatus::Running) => {
                st.pause_requested = true;
                RunStatus::Paused
            }
            (ControlVerb::Resume, RunStatus::Paused) => {
                st.pause_requested = false;
                RunStatus::Running
            }
            (ControlVerb::Stop, RunStatus::Pending | RunStatus::Running | RunStatus::Paused) => {
                st.stop_requested = true;
                RunStatus::Stopped
            }
            (verb, status) => {
                let verb = format!("{verb:?}").to_lowercase();
                return Err(ApiError::Conflict(format!("cannot {verb} a run that is {status}")));
            }
        };
        if verb != ControlVerb::Stop {
            st.status = next;
        }
        drop(st);
        self.wake.notify_all();
        self.persist_info();
        self.bump();
        Ok(next)
    }

    /// Waits until the worker is done.
    pub async fn finished(&self) {
        let mut rx = self.subscribe();
        loop {
            if self.lock().done {
                return;
            }
            if rx.changed().await.is_err() {
                return;
            }
        }
    }

    fn push_event(&self, event: RunEvent) {
        let mut st = self.lock();
        if let Some(file) = st.jsonl.as_mut() {
            let line = serde_json::to_string(&event).expect("event serializes");
            if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                tracing::error!(run = %self.id, error = %e, "writing event log failed");
            }
        }
        st.step = st.step.max(event.step);
        st.events.push(event);
        drop(st);
        self.bump();
    }

    fn persist_info(&self) {
        if let Some(dir) = &self.dir {
            let _guard = self.persist.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = write_json(&dir.join("run.json"), &self.info()) {
                tracing::error!(run = %self.id, error = %e, "writing run.json failed");
            }
        }
    }

    fn finish(&self, status: RunStatus, summary: Option<RunSummary>, message: Option<String>, q: Option<QTable>) {
        let mut st = self.lock();
        st.status = status;
        st.summary = summary;
        if message.is_some() {
            st.message = message;
        }
        if q.is_some() {
            st.q = q;
        }
        st.jsonl = None;
        drop(st);
        // Written before `done` so waiters see the final run.json.
        self.persist_info();
        self.lock().done = true;
        self.bump();
    }

    /// Logs a terminal status the trainer never got to log itself.
    fn fail_outside_trainer(&self, status: RunStatus, message: String) {
        let (seq, step) = {
            let st = self.lock();
            (st.events.len() as u64, st.step)
        };
        self.push_event(RunEvent {
            seq,
            step,
            payload: EventPayload::Status {
                status,
                message: Some(message.clone()),
            },
        });
        self.finish(status, None, Some(message), None);
    }
}

struct ServiceHooks {
    run: Arc<Run>,
    rx: mpsc::Receiver<GuidanceSet>,
    startup: ScheduledGuidance,
}

impl TrainingHooks for ServiceHooks {
    fn poll_guidance(&mut self, step: u64) -> GuidancePoll {
        let mut poll = self.startup.poll_guidance(step);
        loop {
            match self.rx.try_recv() {
                Ok(set) => poll.sets.push(set),
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => {
                    poll.closed = true;
                    break;
                }
            }
        }
        poll
    }

    fn at_step_boundary(&mut self, step: u64, q: &QTable) -> ControlFlow<()> {
        let mut st = self.run.lock();
        st.step = step;
        match st.q.as_mut() {
            Some(snapshot) => snapshot.clone_from(q),
            None => st.q = Some(q.clone()),
        }
        loop {
            if st.stop_requested {
                return ControlFlow::Break(());
            }
            if !st.pause_requested {
                return ControlFlow::Continue(());
            }
            st = self.run.wake.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }

    fn on_event(&mut self, event: &RunEvent) {
        self.run.push_event(event.clone());
    }

    fn on_checkpoint(&mut self, step: u64, q: &QTable, dataset: &EmpiricalDataset) -> Option<String> {
        let dir = self.run.dir.as_ref()?;
        let path = dir.join(format!("checkpoint-{step:010}.json"));
        let dataset: serde_json::Value = serde_json::from_str(&dataset.to_json()).expect("dataset json round-trips");
        let body = serde_json::json!({ "step": step, "qtable": q, "dataset": dataset });
        match write_json(&path, &body) {
            Ok(()) => Some(path.display().to_string()),
            Err(e) => {
                tracing::error!(run = %self.run.id, error = %e, "checkpoint failed");
                None
            }
        }
    }
}

/// Body of the worker thread for one run.
fn execute(run: Arc<Run>) {
    let Some(rx) = run.guidance_rx.lock().unwrap_or_else(|p| p.into_inner()).take() else {
        return;
    };
    {
        let mut st = run.lock();
        if st.stop_requested {
            drop(st);
            run.fail_outside_trainer(RunStatus::Stopped, "stopped before it started".into());
            return;
        }
        st.status = RunStatus::Running;
    }
    run.persist_info();
    run.bump();

    let env = &run.env;
    let cfg = run.config.learner_config(env);
    let opts = run.config.train_options();
    let mut startup = Vec::new();
    if let Some(name) = &run.config.scenario {
        match scripted_guidance(name, env) {
            Ok(mut set) => {
                set.id = run.next_guidance_id();
                startup.push((0, set));
            }
            Err(e) => tracing::warn!(run = %run.id, error = %e, "scenario unavailable"),
        }
    }
    if let Some(llm) = run.config.llm.as_ref().filter(|l| l.request_at_start) {
        let cap = env.mdp.r_abs_max() / (1.0 - cfg.gamma);
        let fetched = llm
            .prompt(env, cap, None)
            .and_then(|p| LlmClient::new(llm.endpoint.clone())?.request_guidance(&p));
        match fetched {
            Ok(raw) => {
                let mut set = sanitize_guidance(&raw, &env.schema, cap).set;
                set.id = run.next_guidance_id();
                startup.push((0, set));
            }
            Err(e) => {
                tracing::warn!(run = %run.id, error = %e, "startup guidance unavailable; training unguided");
                run.lock().message = Some(format!("startup guidance unavailable: {e}"));
            }
        }
    }

    let mut hooks = ServiceHooks {
        run: Arc::clone(&run),
        rx,
        startup: ScheduledGuidance::new(startup),
    };
    match train_seeded(env, &cfg, &opts, &mut hooks) {
        Ok(outcome) => run.finish(outcome.log.status, outcome.log.summary, None, Some(outcome.q)),
        Err(e) => run.fail_outside_trainer(RunStatus::Failed, e.to_string()),
    }
}

/// All runs known to the service.
pub struct Registry {
    runs: RwLock<HashMap<String, Arc<Run>>>,
    order: RwLock<Vec<String>>,
    data_dir: Option<PathBuf>,
    permits: Arc<Semaphore>,
}

impl Registry {
    /// `max_concurrent` runs train at once; the rest wait as pending.
    pub fn new(data_dir: Option<PathBuf>, max_concurrent: usize) -> Self {
        Registry {
            runs: RwLock::new(HashMap::new()),
            order: RwLock::new(Vec::new()),
            data_dir,
            permits: Arc::new(Semaphore::new(max_concurrent.max(1))),
        }
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    fn insert(&self, run: Arc<Run>) {
        self.order.write().unwrap_or_else(|p| p.into_inner()).push(run.id.clone());
        self.runs.write().unwrap_or_else(|p| p.into_inner()).insert(run.id.clone(), run);
    }

    pub fn get(&self, id: &str) -> Result<Arc<Run>, ApiError> {
        self.runs
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    pub fn list(&self) -> Vec<Arc<Run>> {
        let runs = self.runs.read().unwrap_or_else(|p| p.into_inner());
        let order = self.order.read().unwrap_or_else(|p| p.into_inner());
        order.iter().filter_map(|id| runs.get(id).cloned()).collect()
    }

    /// Registers a validated run and schedules it. Must be called inside a
    /// tokio runtime.
    pub fn create(&self, config: RunConfig) -> Result<Arc<Run>, ApiError> {
        let env = config.validate().map_err(ApiError::Invalid)?;
        let id = uuid::Uuid::new_v4().to_string();
        let dir = match &self.data_dir {
            Some(root) => {
                let dir = root.join(&id);
                fs::create_dir_all(&dir).map_err(|e| ApiError::Internal(format!("{}: {e}", dir.display())))?;
                write_json(&dir.join("config.json"), &config).map_err(|e| ApiError::Internal(e.to_string()))?;
                Some(dir)
            }
            None => None,
        };
        let run = Arc::new(Run::new(id, config, env, now_secs(), dir.clone()));
        if let Some(dir) = &dir {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("events.jsonl"))
                .map_err(|e| ApiError::Internal(e.to_string()))?;
            run.lock().jsonl = Some(file);
            run.persist_info();
        }
        self.insert(Arc::clone(&run));

        let permits = Arc::clone(&self.permits);
        let worker = Arc::clone(&run);
        tokio::spawn(async move {
            let Ok(_permit) = permits.acquire_owned().await else { return };
            let id = worker.id.clone();
            if let Err(e) = tokio::task::spawn_blocking(move || execute(worker)).await {
                tracing::error!(run = %id, error = %e, "run worker panicked");
            }
        });
        tracing::info!(run = %run.id, env = run.config.env.name(), "run created");
        Ok(run)
    }

    /// Loads runs persisted under the data directory. Runs that were still
    /// live when the service went down are marked failed.
    pub fn restore(&self) -> std::io::Result<usize> {
        let Some(root) = &self.data_dir else { return Ok(0) };
        if !root.exists() {
            return Ok(0);
        }
        let mut found: Vec<(u64, Arc<Run>)> = Vec::new();
        for entry in fs::read_dir(root)? {
            let dir = entry?.path();
            match load_run(&dir) {
                Ok(Some(run)) => found.push((run.created_at, run)),
                Ok(None) => {}
                Err(e) => tracing::warn!(dir = %dir.display(), error = %e, "skipping unreadable run"),
            }
        }
        found.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        let n = found.len();
        for (_, run) in found {
            self.insert(run);
        }
        Ok(n)
    }

    /// Stops every live run and waits for the workers to exit.
    pub async fn shutdown(&self) {
        let runs = self.list();
        for run in &runs {
            let _ = run.control(ControlVerb::Stop);
        }
        for run in &runs {
            run.finished().await;
        }
    }
}

fn load_run(dir: &Path) -> Result<Option<Arc<Run>>, Box<dyn std::error::Error>> {
    let config_path = dir.join("config.json");
    if !config_path.exists() {
        return Ok(None);
    }
    let id = dir.file_name().and_then(|n| n.to_str()).ok_or("bad dir name")?.to_string();
    let config: RunConfig = serde_json::from_slice(&fs::read(config_path)?)?;
    let env = config.env.build()?;
    let info: Option<RunInfo> = fs::read(dir.join("run.json")).ok().and_then(|b| serde_json::from_slice(&b).ok());
    let mut events = Vec::new();
    if let Ok(file) = File::open(dir.join("events.jsonl")) {
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RunEvent>(&line) {
                Ok(e) => events.push(e),
                // A torn final line from a crash.
                Err(_) => break,
            }
        }
    }
    let created_at = info.as_ref().map_or(0, |i| i.created_at);
    let run = Arc::new(Run::new(id, config, env, created_at, Some(dir.to_path_buf())));
    run.guidance_rx.lock().unwrap_or_else(|p| p.into_inner()).take();
    {
        let mut st = run.lock();
        st.step = events.last().map_or(0, |e| e.step);
        st.events = events;
        if let Some(info) = &info {
            st.summary = info.summary.clone();
            st.message = info.message.clone();
        }
        // Without run.json the run never recorded a terminal status.
        st.status = info.as_ref().map_or(RunStatus::Pending, |i| i.status);
        st.done = true;
    }
    if !run.status().is_terminal() {
        run.lock().jsonl = OpenOptions::new().append(true).open(dir.join("events.jsonl")).ok();
        run.fail_outside_trainer(RunStatus::Failed, "service stopped before the run finished".into());
    }
    Ok(Some(run))
}
