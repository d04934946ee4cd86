use rand::seq::SliceRandom;

use crate::rng::{self, Streams};

/// One client's share of a dataset, as indices into it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientShard {
    pub client: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    /// Number of samples held by the client.
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// Shuffles `0..n` and deals it into `clients` contiguous shards. The first
/// `n mod clients` shards receive one extra sample.
pub fn partition_iid(n: usize, clients: usize, seed: u64) -> Vec<ClientShard> {
    assert!(clients >= 1 && clients <= n, "need 1 <= clients ({clients}) <= n ({n})");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Streams::new(seed).rng(rng::PARTITION, &[]));
    let base = n / clients;
    let extra = n % clients;
    let mut start = 0;
    (0..clients)
        .map(|client| {
            let size = base + usize::from(client < extra);
            let indices = order[start..start + size].to_vec();
            start += size;
            ClientShard { client, indices }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sizes(shards: &[ClientShard]) -> Vec<usize> {
        shards.iter().map(ClientShard::size).collect()
    }

    #[test]
    fn even_and_remainder_sizes() {
        assert_eq!(sizes(&partition_iid(100, 4, 0)), vec![25; 4]);
        assert_eq!(sizes(&partition_iid(10, 3, 0)), vec![4, 3, 3]);
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(partition_iid(50, 4, 9), partition_iid(50, 4, 9));
        assert_ne!(partition_iid(50, 4, 9), partition_iid(50, 4, 10));
    }

    proptest! {
        #[test]
        fn shards_are_disjoint_and_exhaustive(n in 1usize..300, k in 1usize..20, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let shards = partition_iid(n, k, seed);
            let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.clone()).collect();
            prop_assert_eq!(shards.iter().map(ClientShard::size).sum::<usize>(), n);
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
