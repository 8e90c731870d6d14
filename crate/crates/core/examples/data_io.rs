//! File formats: MGT tensor round trip, IDX parsing from bytes, data set
//! directories and PNG export.

use mgaug::data::{
    export_png, generate_synthetic, load_mgt, parse_idx_images, parse_idx_labels, save_mgt, DType, LabeledImageSet,
    Shape, SyntheticSpec, Tensor,
};

fn main() -> mgaug::Result<()> {
    let dir = std::env::temp_dir().join("mgaug_data_io");
    std::fs::create_dir_all(&dir).map_err(|e| mgaug::Error::io(&dir, e))?;

    let mut spec = SyntheticSpec::two_mode(vec![Shape::Disk, Shape::Ring], 4, 0);
    spec.size = 16;
    let data = generate_synthetic(&spec)?;
    data.set.save_dir(dir.join("set"))?;
    let back = LabeledImageSet::load_dir(dir.join("set"))?;
    println!("data set: {} samples saved and reloaded, equal: {}", back.len(), back == data.set);

    let image = &data.set.samples()[0].image;
    let t = Tensor::from_scalar_field(image, DType::F32);
    save_mgt(dir.join("image.mgt"), &t)?;
    let loaded = load_mgt(dir.join("image.mgt"))?;
    println!("mgt: shape {:?}, dtype {:?}", loaded.shape(), loaded.dtype());
    export_png(image, dir.join("image.png"))?;

    // Two 4x4 images and their labels in IDX layout.
    let mut images = vec![0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0, 4];
    images.extend((0..32u8).map(|i| i * 8));
    let labels = [0, 0, 0x08, 1, 0, 0, 0, 2, 7, 3];
    let parsed = parse_idx_images(&images)?;
    println!("idx: {} images, labels {:?}, first max {}", parsed.len(), parse_idx_labels(&labels)?, parsed[0].max());
    println!("files under {}", dir.display());
    Ok(())
}
