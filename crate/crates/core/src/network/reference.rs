use super::graph::{GraphBuilder, NetworkGraph};
use crate::error::Result;

/// VGG16-scale convolutional trunk used as a timing baseline.
///
/// Thirteen 3×3 convs (64-64, 128-128, 256×3, 512×3, 512×3) with relu6 and
/// 2×2 average pooling between stages, followed by a 1×1 head to one channel.
pub fn vgg16_reference() -> Result<NetworkGraph> {
    let stages: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut b = GraphBuilder::new();
    let mut x = b.input("image", 3);
    for (s, &(c, n)) in stages.iter().enumerate() {
        for i in 0..n {
            let name = format!("vgg.stage{}.conv{}", s + 1, i + 1);
            x = b.conv(&name, x, c, 3, 1, 1, true);
            x = b.relu6(&format!("{name}.act"), x);
        }
        if s + 1 < stages.len() {
            x = b.avg_pool2(&format!("vgg.pool{}", s + 1), x);
        }
    }
    let out = b.conv("vgg.head", x, 1, 1, 1, 1, true);
    b.finish(vec![out], Vec::new(), Vec::new(), None)
}
