mod common;

use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use bftorder::{Application, Digest, NodeId, Signature};
use bftorder_ordering::delivery::{serve_tcp, DeliveryRequest, Subscription};
use bftorder_ordering::{
    serve_blocks, submit_to_all, Block, DeliveryItem, DeliveryMode, DeliveryMonitor, MonitorSettings, OrderingApp,
    SubmitTarget,
};
use bytes::Bytes;
use common::*;

fn chain(blocks: usize) -> Net {
    let mut n = net(4);
    for b in 0..blocks {
        let payload = [tx(&n.clients[0], &format!("b{b}"))];
        decide(&mut n.apps, 0, &payload, 3);
    }
    n
}

#[test]
fn full_stream_yields_stored_blocks_in_order() {
    let n = chain(3);
    let mut stream = serve_blocks(n.apps[0].store(), 1, DeliveryMode::Full);
    let got: Vec<u64> = (0..3).map(|_| stream.try_next().unwrap().number()).collect();
    assert_eq!(got, vec![1, 2, 3]);
    assert!(stream.try_next().is_none());
    assert_eq!(stream.position(), 4);
    let mut from_genesis = serve_blocks(n.apps[0].store(), 0, DeliveryMode::Full);
    let DeliveryItem::Block(genesis) = from_genesis.try_next().unwrap() else {
        panic!("expected a block")
    };
    assert_eq!(genesis, n.genesis);
}

#[test]
fn header_stream_verifies_without_payload() {
    let n = chain(2);
    let app = &n.apps[2];
    let verify = |s: &Signature, d: &Digest| app.verify_signature(s, d);
    let mut stream = serve_blocks(n.apps[0].store(), 1, DeliveryMode::HeaderMeta);
    for expected in 1..=2u64 {
        let DeliveryItem::Summary(summary) = stream.try_next().unwrap() else {
            panic!("expected a summary")
        };
        assert_eq!(summary.header.number, expected);
        assert!(summary.verify(&n.config.consensus, verify).is_ok());
        let full = n.apps[0].store().block(expected).unwrap();
        assert_eq!(summary.proposal_digest(), full.proposal().digest());

        let mut tampered = summary.clone();
        tampered.header.data_hash = Digest::of(b"other");
        assert!(tampered.verify(&n.config.consensus, verify).is_err());
    }
}

#[test]
fn stream_waits_at_the_frontier() {
    let mut n = chain(1);
    let mut stream = serve_blocks(n.apps[0].store(), 2, DeliveryMode::Full);
    assert!(stream.next_timeout(Duration::from_millis(20)).is_none());
    let waiter = thread::spawn(move || stream.next_timeout(Duration::from_secs(5)).map(|i| i.number()));
    thread::sleep(Duration::from_millis(30));
    let payload = [tx(&n.clients[0], "late")];
    decide(&mut n.apps, 0, &payload, 3);
    assert_eq!(waiter.join().unwrap(), Some(2));
}

#[test]
fn tcp_subscription_round_trip() {
    let mut n = chain(2);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    serve_tcp(listener, n.apps[0].store().clone());
    let mut full = Subscription::connect(
        addr,
        DeliveryRequest {
            from: 1,
            mode: DeliveryMode::Full,
        },
    )
    .unwrap();
    let mut headers = Subscription::connect(
        addr,
        DeliveryRequest {
            from: 2,
            mode: DeliveryMode::HeaderMeta,
        },
    )
    .unwrap();
    let timeout = Duration::from_secs(5);
    for expected in 1..=2u64 {
        let DeliveryItem::Block(b) = full.recv(timeout).unwrap() else {
            panic!("expected a block")
        };
        assert_eq!(b, n.apps[0].store().block(expected).unwrap());
    }
    assert!(matches!(headers.recv(timeout).unwrap(), DeliveryItem::Summary(s) if s.header.number == 2));
    decide(&mut n.apps, 0, &[tx(&n.clients[1], "three")], 3);
    assert_eq!(full.recv(timeout).unwrap().number(), 3);
    assert_eq!(headers.recv(timeout).unwrap().number(), 3);
}

fn settings(f: usize) -> MonitorSettings {
    MonitorSettings {
        f,
        threshold: Duration::from_millis(200),
        quarantine: Duration::from_millis(200),
    }
}

fn ids(n: u64) -> Vec<NodeId> {
    (0..n).map(NodeId).collect()
}

fn summaries(n: &Net) -> Vec<bftorder_ordering::BlockSummary> {
    n.apps[0].store().blocks().iter().skip(1).map(Block::summary).collect()
}

#[test]
fn monitor_keeps_an_up_to_date_provider() {
    let n = chain(3);
    let app = &n.apps[1];
    let verify = |s: &Signature, d: &Digest| app.verify_signature(s, d);
    let mut monitor = DeliveryMonitor::new(settings(1), ids(4), NodeId(0), 1);
    for s in summaries(&n) {
        monitor.on_full_block(s.header.number);
        for node in 1..4 {
            monitor.on_header_item(NodeId(node), &s, &n.config.consensus, verify).unwrap();
        }
    }
    for ms in (0..2000).step_by(50) {
        assert!(monitor.evaluate(Duration::from_millis(ms)).is_none());
    }
    assert_eq!(monitor.full_provider(), NodeId(0));
}

#[test]
fn monitor_switches_after_the_threshold_when_f_streams_are_ahead() {
    let n = chain(3);
    let app = &n.apps[1];
    let verify = |s: &Signature, d: &Digest| app.verify_signature(s, d);
    let mut monitor = DeliveryMonitor::new(settings(1), ids(4), NodeId(0), 7);
    let items = summaries(&n);
    monitor.on_full_block(1);
    // One header stream (f = 1) reaches block 3.
    for s in &items {
        assert!(monitor.on_header_item(NodeId(2), s, &n.config.consensus, verify).unwrap());
    }
    assert!(monitor.evaluate(Duration::from_millis(0)).is_none());
    assert!(monitor.evaluate(Duration::from_millis(199)).is_none());
    let switch = monitor.evaluate(Duration::from_millis(200)).unwrap();
    assert_eq!(switch.from, NodeId(0));
    assert_eq!(switch.to, NodeId(2));
    assert_eq!(monitor.full_provider(), NodeId(2));
    assert_eq!(monitor.switches().len(), 1);
}

#[test]
fn monitor_ignores_fewer_than_f_streams_ahead() {
    // Seven nodes: f = 2. Only one honest-looking stream is ahead.
    let mut n = net(7);
    for b in 0..2 {
        let payload = [tx(&n.clients[0], &format!("b{b}"))];
        decide(&mut n.apps, 0, &payload, 5);
    }
    let app = &n.apps[1];
    let verify = |s: &Signature, d: &Digest| app.verify_signature(s, d);
    let mut monitor = DeliveryMonitor::new(settings(2), ids(7), NodeId(0), 3);
    for s in summaries(&n) {
        monitor.on_header_item(NodeId(5), &s, &n.config.consensus, verify).unwrap();
    }
    for ms in (0..3000).step_by(100) {
        assert!(monitor.evaluate(Duration::from_millis(ms)).is_none());
    }
    // A second stream ahead completes the set and the switch follows.
    for s in summaries(&n) {
        monitor.on_header_item(NodeId(6), &s, &n.config.consensus, verify).unwrap();
    }
    assert!(monitor.evaluate(Duration::from_millis(3000)).is_none());
    let switch = monitor.evaluate(Duration::from_millis(3200)).unwrap();
    assert!([NodeId(5), NodeId(6)].contains(&switch.to));
}

#[test]
fn monitor_drops_invalid_and_stale_items() {
    let n = chain(2);
    let app = &n.apps[1];
    let verify = |s: &Signature, d: &Digest| app.verify_signature(s, d);
    let mut monitor = DeliveryMonitor::new(settings(1), ids(4), NodeId(0), 1);
    let items = summaries(&n);

    let mut forged = items[1].clone();
    forged.signatures.truncate(2);
    assert!(monitor.on_header_item(NodeId(3), &forged, &n.config.consensus, verify).is_err());
    assert_eq!(monitor.header_frontier(NodeId(3)), 0);

    assert!(monitor.on_header_item(NodeId(3), &items[1], &n.config.consensus, verify).unwrap());
    assert!(!monitor.on_header_item(NodeId(3), &items[0], &n.config.consensus, verify).unwrap());
    assert_eq!(monitor.header_frontier(NodeId(3)), 2);
}

#[test]
fn replaced_provider_is_quarantined() {
    let n = chain(3);
    let app = &n.apps[1];
    let verify = |s: &Signature, d: &Digest| app.verify_signature(s, d);
    let mut monitor = DeliveryMonitor::new(settings(1), ids(4), NodeId(0), 11);
    let items = summaries(&n);
    for node in [0u64, 1] {
        for s in &items {
            monitor.on_header_item(NodeId(node), s, &n.config.consensus, verify).unwrap();
        }
    }
    monitor.evaluate(Duration::ZERO);
    let first = monitor.evaluate(Duration::from_millis(200)).unwrap();
    assert_eq!(first.to, NodeId(1));
    // Node 1 withholds too; node 0 is ahead but still quarantined.
    assert!(monitor.evaluate(Duration::from_millis(250)).is_none());
    assert!(monitor.evaluate(Duration::from_millis(399)).is_none());
    let second = monitor.evaluate(Duration::from_millis(450)).unwrap();
    assert_eq!(second.to, NodeId(0));
}

struct Node<'a> {
    app: Option<&'a OrderingApp>,
    accepted: Vec<Bytes>,
}

impl SubmitTarget for Node<'_> {
    type Error = &'static str;
    fn submit(&mut self, tx: Bytes) -> Result<(), Self::Error> {
        let app = self.app.ok_or("unreachable")?;
        app.verify_request(&tx).map_err(|_| "rejected")?;
        self.accepted.push(tx);
        Ok(())
    }
}

#[test]
fn submit_to_all_reaches_every_live_consenter() {
    let n = net(4);
    let t = tx(&n.clients[0], "everyone");
    let mut nodes: Vec<Node> = n
        .apps
        .iter()
        .map(|a| Node {
            app: Some(a),
            accepted: vec![],
        })
        .collect();
    assert_eq!(submit_to_all(&t, &mut nodes), 4);
    assert!(nodes.iter().all(|node| node.accepted == vec![t.clone()]));

    nodes[2].app = None;
    let second = tx(&n.clients[0], "three of four");
    assert_eq!(submit_to_all(&second, &mut nodes), 3);
    assert_eq!(nodes[2].accepted.len(), 1);
}
