use bftorder_ordering::{Keypair, Transaction, TxKind};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transactions_round_trip_and_stay_signed(body in proptest::collection::vec(any::<u8>(), 0..2048), who in 0u64..8) {
        let key = Keypair::derive("client", who);
        let tx = Transaction::signed(TxKind::Ordinary, body.clone(), &key);
        let bytes = tx.encode();
        let back = Transaction::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &tx);
        prop_assert!(back.verify_signature().is_ok());
        prop_assert_eq!(back.id(), tx.id());
        // Encoded size grows one-for-one with the body.
        let empty = Transaction::signed(TxKind::Ordinary, Vec::new(), &key).encode().len();
        prop_assert_eq!(bytes.len(), empty + body.len());
    }

    #[test]
    fn tampered_bodies_fail_verification(body in proptest::collection::vec(any::<u8>(), 1..256), flip in any::<prop::sample::Index>()) {
        let key = Keypair::derive("client", 1);
        let mut tx = Transaction::signed(TxKind::Ordinary, body.clone(), &key);
        let mut tampered = body;
        let i = flip.index(tampered.len());
        tampered[i] ^= 0x01;
        tx.body = tampered.into();
        prop_assert!(tx.verify_signature().is_err());
    }
}
