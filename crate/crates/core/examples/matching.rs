//! Bipartite matching and the detection objective on a hand-made output.

use usground::detector::DetectionOutput;
use usground::losses::{hungarian, match_queries, total_loss, FocalParams, GroundTruth, LossWeights};

fn main() -> usground::Result<()> {
    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]];
    println!("assignment for {cost:?}: {:?}", hungarian(&cost));

    let out = DetectionOutput {
        boxes: vec![[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.3], [0.5, 0.5, 0.9, 0.9]],
        logits: vec![vec![-2.0, -2.0], vec![2.5, 1.5], vec![0.0, -1.0]],
        prompt: "dark lesion".into(),
    };
    let gts = vec![GroundTruth {
        cxcywh: [0.68, 0.62, 0.28, 0.3],
        positive_tokens: vec![true, true],
    }];
    let (w, fp) = (LossWeights::default(), FocalParams::default());
    let m = match_queries(&out, &gts, &w, fp)?;
    println!("matched (query, gt) pairs: {:?}", m.pairs);
    let (loss, _) = total_loss(&out, &gts, &w, fp)?;
    println!(
        "l1 {:.4}  giou {:.4}  focal {:.4}  total {:.4}",
        loss.l1, loss.giou, loss.focal, loss.total
    );
    Ok(())
}
