mod common;

use std::sync::Arc;

use bftorder::{Application, NodeId, Reconfig};
use bftorder_ordering::{Block, BlockSource, BlockStore, OrderingApp, Transaction};
use bytes::Bytes;
use common::*;

/// Serves a real chain but replaces every signature of one block with
/// signatures by keys outside the consenter set.
struct Forger {
    inner: BlockStore,
    forged: u64,
}

impl BlockSource for Forger {
    fn height(&self) -> u64 {
        self.inner.height()
    }

    fn block(&self, number: u64) -> Option<Block> {
        let mut block = self.inner.block(number)?;
        if number == self.forged {
            let digest = block.proposal().digest();
            block.signatures = (0..3u64)
                .map(|i| {
                    let impostor = bftorder_ordering::Keypair::derive("impostor", i);
                    impostor.sign_digest(NodeId(i), &digest, bftorder::Attestation::Commit.to_bytes())
                })
                .collect();
        }
        Some(block)
    }
}

fn build_chain(n: &mut Net, blocks: usize, participants: usize) {
    for b in 0..blocks {
        let payload = [tx(&n.clients[0], &format!("b{b}"))];
        decide(&mut n.apps[..participants], 0, &payload, 3);
    }
}

fn fresh_node(n: &Net, id: u64) -> OrderingApp {
    OrderingApp::new(NodeId(id), n.keys[id as usize].clone(), BlockStore::in_memory(n.genesis.clone())).unwrap()
}

#[test]
fn lagging_node_catches_up_and_matches_byte_for_byte() {
    let mut n = net(4);
    build_chain(&mut n, 5, 3);
    let source = n.apps[0].store().clone();
    let mut lagging = fresh_node(&n, 3).with_peers(vec![(NodeId(0), Arc::new(source.clone()) as Arc<dyn BlockSource>)]);
    let outcome = lagging.sync();
    assert_eq!(lagging.store().height(), 5);
    assert_eq!(outcome.latest.unwrap().sequence(), Some(bftorder::Seq(5)));
    assert_eq!(lagging.store().canonical_bytes(), source.canonical_bytes());
    assert_eq!(lagging.stats().synced_blocks, 5);
}

#[test]
fn forging_peer_is_skipped_for_an_honest_one() {
    let mut n = net(4);
    build_chain(&mut n, 4, 3);
    let honest = n.apps[1].store().clone();
    let forger = Forger {
        inner: n.apps[0].store().clone(),
        forged: 2,
    };
    let mut node = fresh_node(&n, 3).with_peers(vec![
        (NodeId(0), Arc::new(forger) as Arc<dyn BlockSource>),
        (NodeId(1), Arc::new(honest.clone()) as Arc<dyn BlockSource>),
    ]);
    node.sync();
    assert_eq!(node.store().height(), 4);
    assert_eq!(node.stats().sync_rejections, 1);
    assert_eq!(node.store().canonical_bytes(), honest.canonical_bytes());
}

#[test]
fn only_forging_peers_leave_the_node_at_the_last_valid_block() {
    let mut n = net(4);
    build_chain(&mut n, 4, 3);
    let forger = Forger {
        inner: n.apps[0].store().clone(),
        forged: 3,
    };
    let mut node = fresh_node(&n, 3).with_peers(vec![(NodeId(0), Arc::new(forger) as Arc<dyn BlockSource>)]);
    let outcome = node.sync();
    assert_eq!(node.store().height(), 2);
    assert_eq!(outcome.reconfig, Reconfig::Unchanged);
}

#[test]
fn sync_applies_config_found_in_pulled_history() {
    let mut n = net(4);
    build_chain(&mut n, 1, 3);
    let mut five = channel_config(5, &n.clients, &n.admin);
    five.consensus.batch_max_count = 7;
    let config_tx = Transaction::config(&five, &n.admin).encode();
    decide(&mut n.apps[..3], 0, &[config_tx], 3);
    // The next block needs q=4 signatures from the five-node set.
    let five_key = consenter_key(4);
    let mut fifth =
        OrderingApp::new(NodeId(4), five_key, BlockStore::in_memory(n.genesis.clone())).unwrap().with_peers(vec![(
            NodeId(0),
            Arc::new(n.apps[0].store().clone()) as Arc<dyn BlockSource>,
        )]);
    fifth.sync();
    let mut signers: Vec<OrderingApp> = n.apps.drain(..3).collect();
    signers.push(fifth);
    let payload: Vec<Bytes> = vec![tx(&n.clients[1], "after")];
    decide(&mut signers, 0, &payload, 4);

    let source = signers[0].store().clone();
    let mut node = fresh_node(&n, 3).with_peers(vec![(NodeId(0), Arc::new(source.clone()) as Arc<dyn BlockSource>)]);
    let outcome = node.sync();
    assert_eq!(node.store().height(), 3);
    let Reconfig::Changed(config) = outcome.reconfig else {
        panic!("reconfiguration not reported")
    };
    assert_eq!(config.n, 5);
    assert_eq!(config.batch_max_count, 7);
    assert_eq!(node.config().consensus, config);
}
