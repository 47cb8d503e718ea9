mod common;

use bftorder::{AppError, Application, Consenter, Digest, NodeId, Reconfig, Signature};
use bftorder_ordering::{validate_block, Block, BlockError, Transaction, TxKind};
use bytes::Bytes;
use common::*;

#[test]
fn filter_accepts_signed_and_rejects_unknown_or_stored() {
    let mut n = net(4);
    let good = tx(&n.clients[0], "a");
    assert!(n.apps[0].filter(&good).is_ok());

    let stranger = bftorder_ordering::Keypair::derive("stranger", 0);
    assert_eq!(n.apps[0].filter(&tx(&stranger, "a")).unwrap_err(), AppError::Unauthorized);

    decide(&mut n.apps, 0, std::slice::from_ref(&good), 3);
    // Oracle: scan the ledger for the transaction bytes.
    let in_ledger = n.apps[1]
        .store()
        .blocks()
        .iter()
        .any(|b| b.data.contains(&good));
    assert!(in_ledger);
    assert_eq!(n.apps[1].filter(&good).unwrap_err(), AppError::Duplicate);
    assert_eq!(n.apps[1].verify_request(&good).unwrap_err(), AppError::Duplicate);
}

#[test]
fn truncated_or_forged_requests_are_rejected() {
    let n = net(4);
    let good = tx(&n.clients[0], "a");
    assert!(matches!(
        n.apps[0].verify_request(&good[..good.len() - 1]),
        Err(AppError::Malformed(_))
    ));
    let mut forged = Transaction::decode(&good).unwrap();
    forged.body = Bytes::from_static(b"b");
    assert_eq!(n.apps[0].verify_request(&forged.encode()), Err(AppError::BadSignature));
}

#[test]
fn assemble_packs_ordinary_transactions_in_order() {
    let mut n = net(4);
    let txs: Vec<Bytes> = (0..3).map(|i| tx(&n.clients[0], &format!("t{i}"))).collect();
    let meta = meta_for(&n.apps[0], 0);
    let p = n.apps[0].assemble(&meta, &requests(&txs));
    assert_eq!(p.metadata, meta);
    let block = Block::from_proposal(&p).unwrap();
    assert_eq!(block.data, txs);
    assert_eq!(block.number(), 1);
    assert_eq!(block.header.previous_hash, n.genesis.hash());

    let single = vec![tx(&n.clients[1], "solo")];
    let p = n.apps[0].assemble(&meta, &requests(&single));
    assert_eq!(Block::from_proposal(&p).unwrap().data, single);
}

#[test]
fn config_transaction_gets_a_block_of_its_own() {
    let mut n = net(4);
    let new_config = channel_config(5, &n.clients, &n.admin);
    let config_tx = Transaction::config(&new_config, &n.admin).encode();
    let batch = vec![tx(&n.clients[0], "x"), config_tx.clone(), tx(&n.clients[0], "y")];
    let meta = meta_for(&n.apps[0], 0);
    let p = n.apps[0].assemble(&meta, &requests(&batch));
    assert_eq!(Block::from_proposal(&p).unwrap().data, vec![config_tx.clone()]);
    assert_eq!(n.apps[0].requests_in(&p), vec![Digest::of(&config_tx)]);

    // A follower refuses a config transaction bundled with others.
    let mut bundled = Block::from_proposal(&p).unwrap();
    bundled.data.push(tx(&n.clients[0], "x"));
    let bundled = Block::new(
        1,
        n.genesis.hash(),
        bundled.data,
        bftorder::ProposalMeta::decode(&meta).unwrap(),
    );
    assert!(matches!(
        n.apps[1].verify_proposal(&bundled.proposal()),
        Err(AppError::InvalidTransaction(_))
    ));
}

#[test]
fn config_transactions_need_an_admin() {
    let n = net(4);
    let new_config = channel_config(5, &n.clients, &n.admin);
    let by_client = Transaction::config(&new_config, &n.clients[0]).encode();
    assert_eq!(n.apps[0].verify_request(&by_client), Err(AppError::Unauthorized));
    let garbage = Transaction::signed(TxKind::Config, &b"not a config"[..], &n.admin).encode();
    assert!(matches!(n.apps[0].verify_request(&garbage), Err(AppError::InvalidTransaction(_))));
}

#[test]
fn verify_proposal_round_trip_and_rejections() {
    let mut n = net(4);
    let txs: Vec<Bytes> = (0..4).map(|i| tx(&n.clients[0], &format!("t{i}"))).collect();
    let meta = meta_for(&n.apps[0], 0);
    let p = n.apps[0].assemble(&meta, &requests(&txs));
    assert!(n.apps[1].verify_proposal(&p).is_ok());

    // Flip one byte of one transaction; the data hash is recomputed so only the tx is wrong.
    let block = Block::from_proposal(&p).unwrap();
    for i in [0usize, 7, 40] {
        let mut data = block.data.clone();
        let mut t = data[1].to_vec();
        let at = i % t.len();
        t[at] ^= 0x01;
        data[1] = t.into();
        let flipped = Block::new(1, n.genesis.hash(), data, bftorder::ProposalMeta::decode(&meta).unwrap());
        assert!(n.apps[1].verify_proposal(&flipped.proposal()).is_err(), "byte {i}");
    }

    let wrong_prev = Block::new(
        1,
        Digest::of(b"elsewhere"),
        block.data.clone(),
        bftorder::ProposalMeta::decode(&meta).unwrap(),
    );
    assert_eq!(
        n.apps[1].verify_proposal(&wrong_prev.proposal()),
        Err(AppError::BadPredecessor)
    );

    let wrong_number = Block::new(
        2,
        n.genesis.hash(),
        block.data.clone(),
        bftorder::ProposalMeta::decode(&meta).unwrap(),
    );
    assert!(matches!(
        n.apps[1].verify_proposal(&wrong_number.proposal()),
        Err(AppError::WrongNumber { expected: 1, got: 2 })
    ));
}

#[test]
fn signatures_verify_across_nodes_and_reject_tampering() {
    let mut n = net(4);
    let meta = meta_for(&n.apps[0], 0);
    let p = n.apps[0].assemble(&meta, &requests(&[tx(&n.clients[0], "x")]));
    let sig = n.apps[0].sign_proposal(&p);
    assert!(n.apps[0].verify_signature(&sig, &p.digest()).is_ok());
    assert!(n.apps[2].verify_signature(&sig, &p.digest()).is_ok());

    for bit in [0usize, 100, 511] {
        let mut bad = sig.value.to_vec();
        bad[bit / 8] ^= 1 << (bit % 8);
        let bad = Signature {
            value: bad.into(),
            ..sig.clone()
        };
        assert_eq!(n.apps[2].verify_signature(&bad, &p.digest()), Err(AppError::BadSignature));
    }
    let unknown = Signature {
        signer: NodeId(9),
        ..sig.clone()
    };
    assert_eq!(
        n.apps[2].verify_signature(&unknown, &p.digest()),
        Err(AppError::UnknownSigner(NodeId(9)))
    );
    let impostor = Signature {
        signer: NodeId(1),
        ..sig
    };
    assert_eq!(n.apps[2].verify_signature(&impostor, &p.digest()), Err(AppError::BadSignature));
}

#[test]
fn validate_block_requires_a_quorum() {
    let mut n = net(4);
    let txs = [tx(&n.clients[0], "x"), tx(&n.clients[1], "y")];
    let (decision, reconfig) = decide(&mut n.apps, 0, &txs, 3);
    assert_eq!(reconfig, Reconfig::Unchanged);
    let block = Block::from_decision(&decision).unwrap();
    let app = &n.apps[1];
    let verify = |s: &Signature, d: &Digest| app.verify_signature(s, d);
    assert!(validate_block(&block, &n.genesis.header, &n.config.consensus, verify).is_ok());

    let mut weak = block.clone();
    weak.signatures.truncate(2);
    assert!(matches!(
        validate_block(&weak, &n.genesis.header, &n.config.consensus, verify),
        Err(BlockError::Quorum(_))
    ));

    let mut doubled = block.clone();
    doubled.signatures[2] = doubled.signatures[0].clone();
    assert!(validate_block(&doubled, &n.genesis.header, &n.config.consensus, verify).is_err());

    let mut reordered = block;
    reordered.data.reverse();
    assert!(matches!(
        validate_block(&reordered, &n.genesis.header, &n.config.consensus, verify),
        Err(BlockError::BadDataHash)
    ));
}

#[test]
fn commit_reports_reconfiguration_and_is_idempotent() {
    let mut n = net(4);
    let (first, r) = decide(&mut n.apps, 0, &[tx(&n.clients[0], "x")], 3);
    assert_eq!(r, Reconfig::Unchanged);

    let five = channel_config(5, &n.clients, &n.admin);
    let (config_decision, r) = decide(&mut n.apps, 0, &[Transaction::config(&five, &n.admin).encode()], 3);
    let Reconfig::Changed(new) = r else {
        panic!("expected a reconfiguration")
    };
    assert_eq!(new.n, 5);
    assert_eq!(new.q, 4);
    assert_eq!(n.apps[2].config().consensus.n, 5);

    // Replays change nothing and report the same outcome.
    let height = n.apps[0].store().height();
    assert_eq!(n.apps[0].deliver(&first), Reconfig::Unchanged);
    assert_eq!(n.apps[0].deliver(&config_decision), Reconfig::Changed(new));
    assert_eq!(n.apps[0].store().height(), height);
}

#[test]
fn stale_consenter_set_cannot_sign_after_reconfiguration() {
    let mut n = net(4);
    // Replace node 3 with node 4.
    let mut next = n.config.clone();
    let mut consenters: Vec<Consenter> = next.consensus.consenters[..3].to_vec();
    consenters.push(Consenter {
        id: NodeId(4),
        key: consenter_key(4).public(),
    });
    next.consensus = next.consensus.with_consenters(consenters).unwrap();
    decide(&mut n.apps, 0, &[Transaction::config(&next, &n.admin).encode()], 3);

    // Nodes 1, 2, 3 of the old set sign the next block.
    let meta = meta_for(&n.apps[0], 0);
    let p = n.apps[0].assemble(&meta, &requests(&[tx(&n.clients[0], "after")]));
    let mut block = Block::from_proposal(&p).unwrap();
    block.signatures = n.apps[1..4].iter().map(|a| a.sign_proposal(&p)).collect();
    let previous = n.apps[0].store().last().header;
    let app = &n.apps[0];
    let current = app.config().consensus.clone();
    let verify = |s: &Signature, d: &Digest| app.verify_signature(s, d);
    assert!(validate_block(&block, &previous, &current, verify).is_err());
    // Under the old set the same signatures would have passed.
    let old_verify = |s: &Signature, d: &Digest| {
        bftorder_ordering::crypto::verify_digest(&consenter_key(s.signer.0).public(), s, d)
            .map_err(|_| AppError::BadSignature)
    };
    assert!(validate_block(&block, &previous, &n.config.consensus, old_verify).is_ok());
}

#[test]
fn removed_client_requests_fail_reverification() {
    let mut n = net(4);
    let pending = tx(&n.clients[1], "queued");
    assert!(n.apps[0].verify_request(&pending).is_ok());
    let without = channel_config(4, &n.clients[..1], &n.admin);
    decide(&mut n.apps, 0, &[Transaction::config(&without, &n.admin).encode()], 3);
    assert_eq!(n.apps[0].verify_request(&pending), Err(AppError::Unauthorized));
    assert!(n.apps[0].verify_request(&tx(&n.clients[0], "still ok")).is_ok());
}
