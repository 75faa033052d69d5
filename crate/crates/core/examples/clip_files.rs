//! Synthetic clips, frame striding with torus padding, horizontal flips, and
//! the binary clip file format.
//!
//! `cargo run --example clip_files`

use sideways::data::{generate_labeled_clip, hflip, read_clip_file, strided_clip, write_clip_file, SpriteSceneSpec};

fn main() {
    let spec = SpriteSceneSpec::default();
    let clip = generate_labeled_clip(&spec, 0, 12, 16, 16, 7).expect("scene fits");
    println!("source: {} frames, label {:?}, mean frame change {:.4}", clip.len(), clip.label, clip.mean_interframe_diff());

    for k in 0..4 {
        let s = strided_clip(&clip, k, 12);
        println!("stride {}: {} frames, mean frame change {:.4}", k + 1, s.len(), s.mean_interframe_diff());
    }

    let flipped = hflip(&clip);
    println!("flipped label {:?}", flipped.label);

    let dir = std::env::temp_dir().join("sideways-clip-example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("clip.swc");
    write_clip_file(&path, &clip).expect("write");
    let back = read_clip_file(&path).expect("read");
    let bytes = std::fs::metadata(&path).expect("stat").len();
    println!("{} written ({bytes} bytes), frames identical: {}", path.display(), back.frames == clip.frames);
}
