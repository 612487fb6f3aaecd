//! A workbench HTTP instance on an ephemeral port.

use std::path::Path;
use std::sync::Arc;

use pba_core::workbench::{api, Workbench};
use tokio::runtime::Runtime;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub struct TestServer {
    pub base: String,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn start(rt: &Runtime, root: &Path) -> TestServer {
        let wb = Arc::new(Workbench::open(root).expect("open store"));
        let (tx, rx) = oneshot::channel::<()>();
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .expect("bind ephemeral port");
        let addr = listener.local_addr().unwrap();
        let handle = rt.spawn(async move {
            axum::serve(listener, api::router(wb))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .expect("server");
        });
        TestServer {
            base: format!("http://{addr}/v1"),
            shutdown: Some(tx),
            handle: Some(handle),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// Stops the instance and waits for it to exit; in-memory state is gone.
    pub fn stop(mut self, rt: &Runtime) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            rt.block_on(h).expect("server task");
        }
    }
}

pub fn runtime() -> Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .expect("runtime")
}
