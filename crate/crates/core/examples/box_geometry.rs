//! Overlap metrics, centerness and distribution decoding on a few boxes.

use cidkd::geometry::{centerness, decode_distribution, offsets, overlap_metrics, BBox};

fn main() -> cidkd::Result<()> {
    let gt = BBox::new(10.0, 10.0, 20.0, 20.0)?;
    for pred in [
        BBox::new(10.0, 10.0, 20.0, 20.0)?,
        BBox::new(12.0, 11.0, 22.0, 21.0)?,
        BBox::new(30.0, 30.0, 40.0, 40.0)?,
    ] {
        let o = overlap_metrics(&pred, &gt);
        println!("{pred:?}: IoU {:.4} GIoU {:.4} DIoU {:.4}", o.iou, o.giou, o.diou);
    }

    for p in [(15.0, 15.0), (12.0, 15.0), (10.5, 10.5)] {
        println!("centerness at {p:?}: {:.4}", centerness(&offsets(p, &gt))?);
    }

    // four sides with eight bins each, peaked at bin 2 on every side
    let mut logits = vec![-4.0f32; 32];
    for side in 0..4 {
        logits[side * 8 + 2] = 4.0;
    }
    println!("decoded at (16, 16), stride 8: {:?}", decode_distribution(&logits, (16.0, 16.0), 8.0)?);
    Ok(())
}
