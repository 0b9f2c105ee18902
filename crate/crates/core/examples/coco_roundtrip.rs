//! Export a dataset as a COCO document and read it back.

use cidkd::synth::{export_coco, generate_dataset, load_coco_annotations, SceneSpec};

fn main() -> cidkd::Result<()> {
    let ds = generate_dataset(&SceneSpec::default(), "val", 0, 5, 1)?;
    let text = export_coco(&ds);
    println!("{} bytes of JSON for {} images", text.len(), ds.len());
    let back = load_coco_annotations(&text, "val")?;
    println!("reloaded {} images, dropped {}", back.dataset.len(), back.dropped);
    assert_eq!(back.dataset.annotations, ds.annotations);
    Ok(())
}
