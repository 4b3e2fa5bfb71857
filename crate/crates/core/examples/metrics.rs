//! Overlap metrics on masks and boxes.

use usground::geometry::{box_iou, dsc, iou, mask_to_tight_box, BinaryMask, BoundingBox};
use usground::losses::{giou_loss, giou_xyxy};

fn main() -> usground::Result<()> {
    let gt = BinaryMask::from_fn(32, 32, |r, c| (8..24).contains(&r) && (8..24).contains(&c));
    let pred = BinaryMask::from_fn(32, 32, |r, c| (12..28).contains(&r) && (8..24).contains(&c));
    println!("mask IoU {:.4}  DSC {:.4}", iou(&pred, &gt)?, dsc(&pred, &gt)?);

    // half-open boxes: width equals the pixel count
    let tight = mask_to_tight_box(&gt)?;
    println!("tight box of gt: {tight:?} (width {})", tight.width());

    let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0)?;
    let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0)?;
    println!("box IoU {:.6}", box_iou(&a, &b)?);
    println!("GIoU {:.6}", giou_xyxy([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]));
    // the loss takes normalized (cx, cy, w, h)
    println!("GIoU loss {:.6}", giou_loss([1.0, 1.0, 2.0, 2.0], [2.0, 2.0, 2.0, 2.0]));
    println!("disjoint GIoU loss {:.6}", giou_loss([0.5, 0.5, 1.0, 1.0], [2.5, 2.5, 1.0, 1.0]));
    Ok(())
}
