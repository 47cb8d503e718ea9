#![allow(dead_code)]

use bftorder::{Application, Configuration, Consenter, Decision, NodeId, ProposalMeta, Reconfig, Request, Seq, View};
use bftorder_ordering::{genesis_block, Block, BlockStore, ChannelConfig, Keypair, OrderingApp, Transaction, TxKind};
use bytes::Bytes;

pub struct Net {
    pub keys: Vec<Keypair>,
    pub admin: Keypair,
    pub clients: Vec<Keypair>,
    pub config: ChannelConfig,
    pub genesis: Block,
    pub apps: Vec<OrderingApp>,
}

pub fn consenter_key(i: u64) -> Keypair {
    Keypair::derive("consenter", i)
}

pub fn channel_config(n: u64, clients: &[Keypair], admin: &Keypair) -> ChannelConfig {
    let consenters = (0..n)
        .map(|i| Consenter {
            id: NodeId(i),
            key: consenter_key(i).public(),
        })
        .collect();
    ChannelConfig {
        consensus: Configuration::new(consenters).unwrap(),
        clients: clients.iter().map(Keypair::public).collect(),
        admins: vec![admin.public()],
    }
}

pub fn net(n: u64) -> Net {
    let admin = Keypair::derive("admin", 0);
    let clients: Vec<Keypair> = (0..2).map(|i| Keypair::derive("client", i)).collect();
    let config = channel_config(n, &clients, &admin);
    let genesis = genesis_block(&config, &admin);
    let keys: Vec<Keypair> = (0..n).map(consenter_key).collect();
    let apps = (0..n)
        .map(|i| {
            OrderingApp::new(NodeId(i), keys[i as usize].clone(), BlockStore::in_memory(genesis.clone())).unwrap()
        })
        .collect();
    Net {
        keys,
        admin,
        clients,
        config,
        genesis,
        apps,
    }
}

pub fn tx(client: &Keypair, body: &str) -> Bytes {
    Transaction::signed(TxKind::Ordinary, body.as_bytes().to_vec(), client).encode()
}

pub fn requests(payloads: &[Bytes]) -> Vec<Request> {
    payloads.iter().cloned().map(Request::new).collect()
}

pub fn meta_for(app: &OrderingApp, view: u64) -> Bytes {
    ProposalMeta {
        view: View(view),
        sequence: Seq(app.store().height() + 1),
    }
    .encode()
}

/// Runs one decision by hand: `leader` assembles, every app verifies, the
/// first `signers` sign, and all apps deliver. Returns the decision and the
/// reconfiguration reported by the leader.
pub fn decide(apps: &mut [OrderingApp], leader: usize, payloads: &[Bytes], signers: usize) -> (Decision, Reconfig) {
    let meta = meta_for(&apps[leader], 0);
    let proposal = apps[leader].assemble(&meta, &requests(payloads));
    for app in apps.iter_mut() {
        app.verify_proposal(&proposal).unwrap();
    }
    let signatures = apps[..signers].iter().map(|a| a.sign_proposal(&proposal)).collect();
    let decision = Decision { proposal, signatures };
    let mut reconfig = Reconfig::Unchanged;
    for (i, app) in apps.iter_mut().enumerate() {
        let r = app.deliver(&decision);
        if i == leader {
            reconfig = r;
        }
    }
    (decision, reconfig)
}
