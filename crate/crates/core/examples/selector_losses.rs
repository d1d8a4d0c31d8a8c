//! The three selector loss terms on small hand-made inputs, and how the
//! weights alpha and beta trade them off.

use hetlm::train::{critic_losses, loss_l1, loss_l2, loss_l3, LossBreakdown};

fn main() -> hetlm::Result<()> {
    // One user, three clusters. Cluster 1 models this user best.
    let pi = [0.2, 0.7, 0.1];
    let nll = [4.0, 1.5, 6.0];
    let l1 = loss_l1(&pi, &nll)?;
    let l2 = loss_l2(&pi);
    println!("expected NLL under the selector: {l1:.4}");
    println!("assignment entropy: {l2:.4} (max ln 3 = {:.4})", 3f64.ln());

    let near = [vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 0.1]];
    let far = [vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]];
    println!("separation penalty, close centroids {:.4}, spread centroids {:.4}", loss_l3(&near), loss_l3(&far));
    println!("single cluster: {}", loss_l3(&near[..1]));

    for (alpha, beta) in [(0.0, 0.0), (2.0, 1.0), (5.0, 9.0)] {
        let b = LossBreakdown::new(l1, l2, loss_l3(&near), alpha, beta);
        println!("alpha {alpha} beta {beta}: overall {:.4}", b.l_overall);
    }

    // Critics only see the users the selector hands them.
    let pis = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
    let nlls = vec![vec![2.0, 5.0], vec![4.0, 1.0], vec![3.0, 3.5]];
    println!("critic losses per cluster: {:?}", critic_losses(&pis, &nlls)?);
    Ok(())
}
