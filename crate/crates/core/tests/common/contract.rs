//! Endpoint examples exercised against a running instance, plus the CLI
//! exit-code contract. Each item is `(name, Ok(detail) | Err(reason))`.

use std::path::Path;
use std::process::Command;

use nalgebra::DMatrix;
use pba_core::case_study;
use pba_core::synthesis::ClassStructure;
use pba_core::workbench::documents::{self, ClassDocument, PriorDocument, SessionDocument};
use pba_core::workbench::store::{Stored, WorkspaceStore};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use tokio::runtime::Runtime;

use super::server::{runtime, TestServer};

pub type Outcome = (String, Result<String, String>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Api<'a> {
    rt: &'a Runtime,
    client: Client,
    server: &'a TestServer,
}

struct Reply {
    status: StatusCode,
    headers: reqwest::header::HeaderMap,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or(Value::Null)
    }

    fn header(&self, name: &str) -> Option<String> {
        self.headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_string)
    }

    fn expect(self, status: StatusCode) -> Result<Reply, String> {
        if self.status == status {
            Ok(self)
        } else {
            Err(format!(
                "expected {status}, got {}: {}",
                self.status,
                String::from_utf8_lossy(&self.bytes)
            ))
        }
    }
}

impl Api<'_> {
    fn send(&self, req: reqwest::RequestBuilder) -> Result<Reply, String> {
        self.rt.block_on(async {
            let resp = req.send().await.map_err(|e| e.to_string())?;
            let status = resp.status();
            let headers = resp.headers().clone();
            let bytes = resp.bytes().await.map_err(|e| e.to_string())?.to_vec();
            Ok(Reply { status, headers, bytes })
        })
    }

    fn get(&self, path: &str) -> Result<Reply, String> {
        self.send(self.client.get(self.server.url(path)))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Reply, String> {
        self.send(self.client.post(self.server.url(path)).json(body))
    }
}

fn three_regions() -> Value {
    json!({
        "variables": {"names": ["L", "SE", "NW"], "units": ["cases", "cases", "cases"], "integral": [true, true, true]},
        "first_prevision": 400.0,
        "first_variance": 40000.0,
        "policy": {"multiplier": 0.5}
    })
}

fn sessions(api: &Api) -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut record = |name: &str, r: Result<String, String>| out.push((name.to_string(), r));

    let created = api.post("/sessions", &three_regions()).and_then(|r| r.expect(StatusCode::CREATED));
    let id = match created.map(|r| r.json()["session_id"].as_str().map(str::to_string)) {
        Ok(Some(id)) => id,
        other => {
            record("POST /sessions -> 201 {session_id}", Err(format!("{other:?}")));
            return out;
        }
    };
    record("POST /sessions -> 201 {session_id}", Ok(id.clone()));

    record(
        "GET /sessions/{id}/next -> hypothetical 500",
        (|| {
            let p = api.get(&format!("/sessions/{id}/next"))?.expect(StatusCode::OK)?.json();
            let n = p["hypotheticals"][0]["value"].as_f64();
            ensure(p["kind"] == "conditional_previsions" && n == Some(500.0), format!("prompt {p}"))?;
            Ok(format!("{} given L = 500", p["variable"]))
        })(),
    );

    record(
        "POST answers -> g = 0.2, Var(SE) = 7225",
        (|| {
            let s = api
                .post(
                    &format!("/sessions/{id}/answers"),
                    &json!({"conditional_previsions": [200.0], "conditional_variance": 5625.0, "prior_prevision": 180.0}),
                )?
                .expect(StatusCode::OK)?
                .json();
            ensure(s["g"] == json!([0.2]) && s["variance"] == json!(7225.0), format!("summary {s}"))?;
            ensure(s["hypothetical"] == json!(238.0), format!("next hypothetical {}", s["hypothetical"]))?;
            Ok("hypothetical 238 for SE".into())
        })(),
    );

    record(
        "POST answers (incoherent) -> 422 with margin",
        (|| {
            let r = api
                .post(
                    &format!("/sessions/{id}/answers"),
                    &json!({"conditional_previsions": [320.0, 330.0], "conditional_variance": 1e-9, "prior_prevision": 300.0}),
                )?
                .expect(StatusCode::UNPROCESSABLE_ENTITY)?
                .json();
            ensure(r["code"] == "incoherent_step", format!("body {r}"))?;
            ensure(r["detail"]["margin"].is_number() && r["message"].is_string(), format!("body {r}"))?;
            Ok(format!("margin {}", r["detail"]["margin"]))
        })(),
    );

    let finalized = (|| {
        api.post(
            &format!("/sessions/{id}/answers"),
            &json!({"conditional_previsions": [320.0, 330.0], "conditional_variance": 4000.0, "prior_prevision": 300.0}),
        )?
        .expect(StatusCode::OK)?;
        let p = api.get(&format!("/sessions/{id}/next"))?.expect(StatusCode::OK)?.json();
        ensure(p["kind"] == "marginal_variances", format!("prompt {p}"))?;
        api.post(
            &format!("/sessions/{id}/finalize"),
            &json!({"marginal_variances": [40000.0, 8100.0, 5625.0]}),
        )?
        .expect(StatusCode::OK)
    })();
    let prior = match finalized {
        Ok(r) => r,
        Err(e) => {
            record("POST finalize -> 200 prior document", Err(e));
            return out;
        }
    };
    record(
        "POST finalize -> 200 prior document",
        (|| {
            let doc: PriorDocument = documents::from_bytes(&prior.bytes).map_err(|e| e.to_string())?;
            let spec = doc.to_spec().map_err(|e| e.to_string())?;
            ensure((spec.covariance()[(0, 1)] - 8470.588235294).abs() < 1e-3, format!("Cov(L,SE) {}", spec.covariance()[(0, 1)]))?;
            Ok(format!("Cov(L,SE) = {:.2}", spec.covariance()[(0, 1)]))
        })(),
    );

    record(
        "GET next / POST answers after finalize -> 409",
        (|| {
            let r = api.get(&format!("/sessions/{id}/next"))?.expect(StatusCode::CONFLICT)?.json();
            ensure(r["code"] == "session_closed", format!("body {r}"))?;
            api.post(
                &format!("/sessions/{id}/answers"),
                &json!({"conditional_previsions": [], "conditional_variance": 1.0, "prior_prevision": 0.0}),
            )?
            .expect(StatusCode::CONFLICT)?;
            api.post(&format!("/sessions/{id}/finalize"), &json!({"marginal_variances": [1.0, 1.0, 1.0]}))?
                .expect(StatusCode::CONFLICT)?;
            Ok("session_closed".into())
        })(),
    );

    record(
        "finalized prior round-trips byte-identically",
        (|| {
            let prior_id = prior.header("x-prior-id").ok_or("missing x-prior-id")?;
            let again = api.get(&format!("/priors/{prior_id}"))?.expect(StatusCode::OK)?;
            ensure(again.bytes == prior.bytes, "GET bytes differ from finalize bytes")?;
            ensure(
                again.header("x-document-sha256") == prior.header("x-document-sha256"),
                "document hash differs",
            )?;
            Ok(format!("{} bytes", again.bytes.len()))
        })(),
    );

    record(
        "unknown ids and routes -> 404 with code",
        (|| {
            for path in ["/sessions/nope/next", "/reports/nope", "/priors/nope", "/no-such-endpoint"] {
                let r = api.get(path)?.expect(StatusCode::NOT_FOUND)?.json();
                ensure(r["code"] == "not_found" && r["message"].is_string(), format!("{path}: {r}"))?;
            }
            Ok("4 paths".into())
        })(),
    );

    record(
        "malformed request body -> 422",
        (|| {
            let r = api
                .post("/sessions", &json!({"variables": 3}))?
                .expect(StatusCode::UNPROCESSABLE_ENTITY)?
                .json();
            ensure(r["code"] == "invalid_request", format!("body {r}"))?;
            Ok("invalid_request".into())
        })(),
    );
    out
}

fn synthesis(api: &Api) -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut record = |name: &str, r: Result<String, String>| out.push((name.to_string(), r));
    let ids = match api.post("/case-study", &json!({})).and_then(|r| r.expect(StatusCode::CREATED)) {
        Ok(r) => r.json(),
        Err(e) => {
            record("POST /case-study", Err(e));
            return out;
        }
    };
    let req = json!({"prior_id": ids["prior_id"], "class_id": ids["class_id"], "batch_id": ids["batch_id"]});
    let base = match api.post("/synthesis", &req).and_then(|r| r.expect(StatusCode::OK)) {
        Ok(r) => r,
        Err(e) => {
            record("POST /synthesis -> 200 report", Err(e));
            return out;
        }
    };
    let report_id = base.header("x-report-id").unwrap_or_default();
    let published = case_study::published().assessment.pba;
    record(
        "POST /synthesis -> PBA row within 2% of the published row",
        (|| {
            let r = base.json();
            let pba: Vec<f64> = serde_json::from_value(r["pba"].clone()).map_err(|e| e.to_string())?;
            let worst = pba
                .iter()
                .zip(&published)
                .map(|(a, b)| ((a - b) / b).abs())
                .fold(0.0, f64::max);
            ensure(worst <= 0.02, format!("worst relative error {worst:.4}"))?;
            ensure(base.header("x-input-sha256").is_some_and(|h| h.starts_with("prior=")), "missing input hashes")?;
            Ok(format!("London {:.2}, worst {:.3}%", pba[0], worst * 100.0))
        })(),
    );

    record(
        "POST /whatif with no overrides -> byte-identical report",
        (|| {
            let w = api
                .post("/whatif", &json!({"report_id": report_id, "overrides": []}))?
                .expect(StatusCode::OK)?;
            ensure(w.bytes == base.bytes, "what-if payload differs from the synthesis payload")?;
            ensure(w.header("x-report-id").is_none(), "unsaved what-if was persisted")?;
            let stored = api.get(&format!("/reports/{report_id}"))?.expect(StatusCode::OK)?;
            ensure(stored.bytes == base.bytes, "stored report differs from the synthesis payload")?;
            Ok(format!("{} bytes", w.bytes.len()))
        })(),
    );

    record(
        "POST /whatif Corr(X, mu_3)_SW 0.60 -> 0.75 raises SW RU",
        (|| {
            let before = base.json()["resolved_pct"][8].as_f64().ok_or("no SW RU")?;
            let w = api
                .post(
                    "/whatif",
                    &json!({"report_id": report_id, "overrides": [
                        {"type": "quantity_correlation", "class": "3", "variable": "SW", "value": 0.75}
                    ]}),
                )?
                .expect(StatusCode::OK)?
                .json();
            let after = w["resolved_pct"][8].as_f64().ok_or("no SW RU")?;
            ensure(after > before, format!("SW RU {before:.3} -> {after:.3}"))?;
            Ok(format!("SW RU {before:.2}% -> {after:.2}%"))
        })(),
    );

    record(
        "POST /whatif?save=true persists the recomputed report",
        (|| {
            let w = api
                .post(
                    "/whatif?save=true",
                    &json!({"report_id": report_id, "overrides": [
                        {"type": "residual_fraction", "class": "2", "value": 20.0}
                    ]}),
                )?
                .expect(StatusCode::OK)?;
            let id = w.header("x-report-id").ok_or("saved what-if has no id")?;
            let stored = api.get(&format!("/reports/{id}"))?.expect(StatusCode::OK)?;
            ensure(stored.bytes == w.bytes, "stored what-if differs")?;
            Ok(id)
        })(),
    );

    record(
        "uninformative class structure -> report equals prior, RU = 0",
        (|| {
            let mut elicitation = serde_json::to_value(case_study::class_elicitation()).map_err(|e| e.to_string())?;
            for row in elicitation["quantity_mean_correlation"].as_array_mut().ok_or("shape")? {
                for v in row.as_array_mut().ok_or("shape")? {
                    *v = json!(0.0);
                }
            }
            let classes = api
                .post(
                    "/classes/build",
                    &json!({"prior_id": ids["prior_id"], "elicitation": elicitation, "completion": "separation"}),
                )?
                .expect(StatusCode::CREATED)?
                .json();
            let r = api
                .post(
                    "/synthesis",
                    &json!({"prior_id": ids["prior_id"], "class_id": classes["id"], "batch_id": ids["batch_id"]}),
                )?
                .expect(StatusCode::OK)?
                .json();
            let prior = case_study::prior();
            let pba: Vec<f64> = serde_json::from_value(r["pba"].clone()).map_err(|e| e.to_string())?;
            let ru: Vec<f64> = serde_json::from_value(r["resolved_pct"].clone()).map_err(|e| e.to_string())?;
            for (l, (p, x)) in pba.iter().zip(prior.prevision().iter()).enumerate() {
                ensure((p - x).abs() <= 1e-9 * x.abs().max(1.0), format!("variable {l}: {p} vs {x}"))?;
            }
            ensure(ru.iter().all(|v| v.abs() <= 1e-9), format!("RU {ru:?}"))?;
            Ok("PBA = P(X), RU = 0".into())
        })(),
    );
    out
}

fn restart(rt: &Runtime, root: &Path) -> Outcome {
    let name = "restart keeps the session and its finalized prior".to_string();
    let result = (|| {
        let first = TestServer::start(rt, root);
        let api = Api {
            rt,
            client: Client::new(),
            server: &first,
        };
        let id = api.post("/sessions", &three_regions())?.expect(StatusCode::CREATED)?.json()["session_id"]
            .as_str()
            .ok_or("no id")?
            .to_string();
        api.post(
            &format!("/sessions/{id}/answers"),
            &json!({"conditional_previsions": [200.0], "conditional_variance": 5625.0, "prior_prevision": 180.0}),
        )?
        .expect(StatusCode::OK)?;
        drop(api);
        first.stop(rt);

        let second = TestServer::start(rt, root);
        let api = Api {
            rt,
            client: Client::new(),
            server: &second,
        };
        let p = api.get(&format!("/sessions/{id}/next"))?.expect(StatusCode::OK)?.json();
        ensure(
            p["variable"] == "NW" && p["hypotheticals"][1]["value"] == json!(238.0),
            format!("prompt after restart {p}"),
        )?;
        api.post(
            &format!("/sessions/{id}/answers"),
            &json!({"conditional_previsions": [320.0, 330.0], "conditional_variance": 4000.0, "prior_prevision": 300.0}),
        )?
        .expect(StatusCode::OK)?;
        let fin = api
            .post(&format!("/sessions/{id}/finalize"), &json!({"marginal_variances": [40000.0, 8100.0, 5625.0]}))?
            .expect(StatusCode::OK)?;
        drop(api);
        second.stop(rt);

        let third = TestServer::start(rt, root);
        let api = Api {
            rt,
            client: Client::new(),
            server: &third,
        };
        let s = api.get(&format!("/sessions/{id}"))?.expect(StatusCode::OK)?.json();
        ensure(s["status"] == "finalized", format!("status {}", s["status"]))?;
        let prior_id = s["prior_id"].as_str().ok_or("no prior id")?;
        let prior = api.get(&format!("/priors/{prior_id}"))?.expect(StatusCode::OK)?;
        ensure(prior.bytes == fin.bytes, "prior bytes differ after restart")?;
        api.get(&format!("/sessions/{id}/next"))?.expect(StatusCode::CONFLICT)?;
        drop(api);
        third.stop(rt);
        Ok("three instances over one store".into())
    })();
    (name, result)
}

/// `load(save(doc))` reproduces the saved bytes for every document kind.
fn persistence(root: &Path) -> Outcome {
    fn round_trip<D: Stored + PartialEq + Clone>(
        store: &WorkspaceStore,
        root: &Path,
        doc: &D,
    ) -> Result<(), String> {
        let saved = store.save(doc).map_err(|e| e.to_string())?;
        let loaded = store.load::<D>(&saved.id).map_err(|e| e.to_string())?;
        ensure(loaded.doc == *doc, format!("{} differs after load", D::KIND))?;
        ensure(documents::to_bytes(&loaded.doc) == saved.bytes, format!("{} bytes differ", D::KIND))?;
        let on_disk = std::fs::read(root.join(D::DIR).join(format!("{}.json", saved.id))).map_err(|e| e.to_string())?;
        ensure(on_disk == saved.bytes, format!("{} file differs", D::KIND))
    }
    let name = "persistence round-trip is byte-identical for every document".to_string();
    let result = (|| {
        let store = WorkspaceStore::open(root).map_err(|e| e.to_string())?;
        let mut kinds = 0;
        for id in store.list::<PriorDocument>().map_err(|e| e.to_string())? {
            round_trip(&store, root, &store.load::<PriorDocument>(&id).map_err(|e| e.to_string())?.doc)?;
            kinds += 1;
        }
        for id in store.list::<ClassDocument>().map_err(|e| e.to_string())? {
            round_trip(&store, root, &store.load::<ClassDocument>(&id).map_err(|e| e.to_string())?.doc)?;
        }
        for id in store.list::<documents::BatchDocument>().map_err(|e| e.to_string())? {
            round_trip(&store, root, &store.load::<documents::BatchDocument>(&id).map_err(|e| e.to_string())?.doc)?;
        }
        for id in store.list::<documents::ReportDocument>().map_err(|e| e.to_string())? {
            round_trip(&store, root, &store.load::<documents::ReportDocument>(&id).map_err(|e| e.to_string())?.doc)?;
        }
        for id in store.list::<SessionDocument>().map_err(|e| e.to_string())? {
            round_trip(&store, root, &store.load::<SessionDocument>(&id).map_err(|e| e.to_string())?.doc)?;
        }
        ensure(kinds > 0, "store is empty")?;
        Ok("prior, class_structure, model_outputs, pba_report, elicitation_session".into())
    })();
    (name, result)
}

/// The case-study structure with every direct quantity-mean covariance
/// inflated to correlation 0.999, leaving `Var(mu)` untouched.
pub fn inflated_structure() -> ClassStructure {
    let prior = case_study::prior();
    let cs = case_study::class_structure().expect("case-study structure");
    let (q, m) = (cs.q(), cs.m());
    let mut cov = cs.cov_x_mu().clone();
    for i in 0..m {
        for l in 0..q {
            let sd_x = prior.covariance()[(l, l)].sqrt();
            let sd_mu = cs.var_mu()[(i * q + l, i * q + l)].sqrt();
            cov[(l, i * q + l)] = 0.999 * sd_x * sd_mu;
        }
    }
    let cov: DMatrix<f64> = cov;
    ClassStructure::new(
        cs.quantity().clone(),
        cs.class_labels().to_vec(),
        cs.counts().to_vec(),
        cs.prevision_mu().clone(),
        cs.var_mu().clone(),
        cs.var_resid().to_vec(),
        cov,
    )
    .expect("structure is shape-valid")
}

fn cli(bin: &Path, root: &Path) -> Vec<Outcome> {
    let run = |args: &[&str]| {
        Command::new(bin)
            .env("PBA_STORE", root)
            .env("RUST_LOG", "warn")
            .args(args)
            .output()
            .map_err(|e| e.to_string())
    };
    let text = |b: &[u8]| String::from_utf8_lossy(b).to_string();
    let mut out = Vec::new();
    let ids = (|| {
        let o = run(&["case-study"])?;
        ensure(o.status.success(), text(&o.stderr))?;
        let s = text(&o.stdout);
        let id = |key: &str| {
            s.lines()
                .find_map(|l| l.strip_prefix(&format!("{key} ")).map(str::to_string))
                .ok_or(format!("no {key} id in {s:?}"))
        };
        Ok::<_, String>((id("prior")?, id("batch")?))
    })();
    let (prior_id, batch_id) = match ids {
        Ok(ids) => ids,
        Err(e) => {
            out.push(("CLI case-study import".to_string(), Err(e)));
            return out;
        }
    };

    out.push((
        "CLI synthesize with indefinite Var(U) -> exit 2".to_string(),
        (|| {
            let file = root.join("inflated_classes.json");
            let doc = ClassDocument::from_structure(&inflated_structure(), None, None);
            std::fs::write(&file, documents::to_bytes(&doc)).map_err(|e| e.to_string())?;
            let o = run(&["import", "classes", file.to_str().unwrap()])?;
            ensure(o.status.success(), text(&o.stderr))?;
            let class_id = text(&o.stdout).trim().to_string();
            let o = run(&["synthesize", "--prior", &prior_id, "--classes", &class_id, "--batch", &batch_id])?;
            let stderr = text(&o.stderr);
            ensure(o.status.code() == Some(2), format!("exit {:?}: {stderr}", o.status.code()))?;
            ensure(stderr.contains("incoherent_elicitation"), format!("stderr {stderr:?}"))?;
            Ok(stderr.lines().last().unwrap_or_default().to_string())
        })(),
    ));

    out.push((
        "CLI input errors -> exit 1".to_string(),
        (|| {
            let o = run(&["report", "no-such-report"])?;
            ensure(o.status.code() == Some(1), format!("exit {:?}", o.status.code()))?;
            let csv = root.join("broken.csv");
            std::fs::write(&csv, "class,model_id,variable,value\n1,M1,L,1\n1,M1,L,2\n").map_err(|e| e.to_string())?;
            let o = run(&["ingest", csv.to_str().unwrap(), "--prior", &prior_id, "--expect", "1:M1"])?;
            ensure(o.status.code() == Some(1), format!("exit {:?}", o.status.code()))?;
            ensure(text(&o.stderr).contains("schema_error"), text(&o.stderr))?;
            Ok("unknown report, duplicate CSV row".into())
        })(),
    ));
    out
}

/// Runs every contract item against fresh stores under `scratch`.
pub fn run_all(scratch: &Path, bin: &Path) -> Vec<Outcome> {
    let rt = runtime();
    let root = scratch.join("store");
    let server = TestServer::start(&rt, &root);
    let api = Api {
        rt: &rt,
        client: Client::new(),
        server: &server,
    };
    let mut out = sessions(&api);
    out.extend(synthesis(&api));
    drop(api);
    server.stop(&rt);
    out.push(persistence(&root));
    out.push(restart(&rt, &scratch.join("restart")));
    out.extend(cli(bin, &scratch.join("cli")));
    out
}
