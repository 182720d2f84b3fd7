//! Block partition geometry: disjoint feature slices, designed anchors,
//! anchor quality scores, block covariance norms, and anchor duplication.
//!
//! Run with: `cargo run --example partition_geometry`

use localist::numerics::{dot, RngState};
use localist::partition::{
    block_cov_norm, build_partition, duplicate_anchors, partition_checksum, score_anchors,
    PartitionSpec,
};

fn main() -> localist::Result<()> {
    let spec = PartitionSpec {
        blocks: 3,
        anchors_per_block: 2,
        fillers_per_block: 2,
        d_per_block: 8,
    };
    let mut rng = RngState::from_seed(42);
    let (partition, embeddings) = build_partition(spec, &mut rng)?;

    println!("=== Block partition ===");
    println!("p = {}, d = {}, vocab = {}", partition.p(), partition.d(), partition.vocab_len());
    for b in 0..partition.p() {
        let slice = partition.slice(b);
        println!(
            "  block {:>3}: slice [{}, {}), anchors {:?}, trigger {:?}",
            partition.block_label(b),
            slice.start,
            slice.end,
            partition.anchors(b),
            partition.trigger(b),
        );
    }

    println!("\n=== Anchor geometry ===");
    // cross-block anchors live on disjoint support: dot products are exactly 0
    let a0 = embeddings.vector(partition.anchors(0)[0]);
    let a1 = embeddings.vector(partition.anchors(1)[0]);
    println!("cross-block anchor dot product: {}", dot(a0, a1));
    for score in score_anchors(&partition, &embeddings) {
        println!(
            "  token {:>2} ({}): within-block spread {:.4}, between-block min distance {:.4}",
            score.token, score.block, score.within_block_spread, score.between_block_min_distance
        );
    }

    println!("\n=== Block covariance norms ===");
    for b in 0..partition.p() {
        let label = partition.block_label(b).to_string();
        println!("  ||X_{label}||_cov = {:.4}", block_cov_norm(&partition, &embeddings, &label)?);
    }

    println!("\n=== Anchor duplication (redundancy) ===");
    let (dup, dup_emb) = duplicate_anchors(&partition, &embeddings, "b1", 3)?;
    println!("block b1 anchors after k=3 duplication: {:?}", dup.anchors(1));
    let scores = score_anchors(&dup, &dup_emb);
    let zero_pairs = scores
        .iter()
        .filter(|s| s.block == "b1" && s.within_block_spread < 1.0)
        .count();
    println!("duplicated anchors sit at distance 0 from their copies ({zero_pairs} affected scores)");

    println!("\npartition checksum: {}", partition_checksum(&partition, &embeddings));
    Ok(())
}
