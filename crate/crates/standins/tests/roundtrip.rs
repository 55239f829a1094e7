use std::fs;
use std::os::unix::fs::{symlink, MetadataExt, PermissionsExt};
use std::path::Path;

use unsuid_standins::ext2::{format, pack_ext2, parse_mke2fs_args, Mke2fsArgs};
use unsuid_standins::{pack_directory, parse_fuse2fs_args, MemTree, MksquashfsArgs, NodeKind};

fn patterned(len: usize, seed: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect()
}

/// A tree that exercises direct, single and double indirect blocks, long
/// directories and both symlink encodings.
fn sample_tree(root: &Path) {
    fs::create_dir_all(root.join("a/b/c")).unwrap();
    fs::write(root.join("empty"), b"").unwrap();
    fs::write(root.join("one"), b"1").unwrap();
    fs::write(root.join("a/block"), patterned(1024, 1)).unwrap();
    fs::write(root.join("a/b/indirect"), patterned(13 * 1024 + 7, 2)).unwrap();
    fs::write(root.join("a/b/c/double"), patterned(300 * 1024 + 5, 3)).unwrap();
    for i in 0..120 {
        fs::write(root.join("a/b").join(format!("entry-with-a-longish-name-{i:03}")), [i as u8]).unwrap();
    }
    symlink("one", root.join("short-link")).unwrap();
    symlink("x".repeat(100), root.join("long-link")).unwrap();
    fs::set_permissions(root.join("one"), fs::Permissions::from_mode(0o640)).unwrap();
}

fn read_ext(image: &Path, path: &str) -> Vec<u8> {
    let fs = ext4_view::Ext4::load_from_path(image).unwrap();
    fs.read(path).unwrap()
}

#[test]
fn ext2_image_reads_back_with_an_independent_reader() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    sample_tree(&src);
    let img = dir.path().join("fs.img");
    pack_ext2(&src, &img, 4096).unwrap();

    let bytes = fs::read(&img).unwrap();
    assert_eq!(&bytes[1080..1082], &[0x53, 0xEF]);
    for rel in ["empty", "one", "a/block", "a/b/indirect", "a/b/c/double", "a/b/entry-with-a-longish-name-077"] {
        assert_eq!(read_ext(&img, &format!("/{rel}")), fs::read(src.join(rel)).unwrap(), "{rel}");
    }
    let efs = ext4_view::Ext4::load_from_path(&img).unwrap();
    assert_eq!(efs.read_link("/short-link").unwrap(), "one");
    assert_eq!(efs.read_link("/long-link").unwrap(), "x".repeat(100).as_str());
    let m = efs.metadata("/one").unwrap();
    let host = fs::metadata(src.join("one")).unwrap();
    assert_eq!((m.mode(), m.uid(), m.gid()), (0o640, host.uid(), host.gid()));
    let names: Vec<_> = efs
        .read_dir("/a/b")
        .unwrap()
        .map(|e| e.unwrap().file_name().as_str().unwrap().to_string())
        .filter(|n| n.starts_with("entry-"))
        .collect();
    assert_eq!(names.len(), 120);
    assert!(efs.exists("/lost+found").unwrap());
}

#[test]
fn multi_group_images_place_files_past_the_first_group() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir(&src).unwrap();
    // Larger than one 8 MiB group of 1 KiB blocks.
    let big = patterned(10 << 20, 9);
    fs::write(src.join("big"), &big).unwrap();
    let img = dir.path().join("fs.img");
    pack_ext2(&src, &img, 24 * 1024).unwrap();
    assert_eq!(read_ext(&img, "/big"), big);
}

#[test]
fn formatting_an_existing_file_keeps_its_size() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("overlay.img");
    fs::File::create(&img).unwrap().set_len(2 << 20).unwrap();
    let args = parse_mke2fs_args(&["-q".into(), "-F".into(), "-t".into(), "ext3".into(), img.clone().into()]).unwrap();
    format(&args).unwrap();
    assert_eq!(fs::metadata(&img).unwrap().len(), 2 << 20);
    let efs = ext4_view::Ext4::load_from_path(&img).unwrap();
    assert!(efs.metadata("/").unwrap().is_dir());
}

#[test]
fn too_small_devices_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = format(&Mke2fsArgs {
        device: dir.path().join("tiny"),
        root_dir: None,
        blocks: Some(8),
        label: None,
    });
    assert!(err.is_err());
}

#[test]
fn ext_tree_loads_into_memory() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    sample_tree(&src);
    let img = dir.path().join("fs.img");
    pack_ext2(&src, &img, 4096).unwrap();
    let tree = MemTree::load_ext(&img).unwrap();
    let a = tree.lookup(1, "a".as_ref()).unwrap();
    let b = tree.lookup(a, "b".as_ref()).unwrap();
    let f = tree.lookup(b, "indirect".as_ref()).unwrap();
    assert_eq!(tree.entry(f).unwrap().kind, NodeKind::File(patterned(13 * 1024 + 7, 2)));
    assert!(tree.lookup(1, "lost+found".as_ref()).is_some());
}

#[test]
fn squashfs_round_trip_matches_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    sample_tree(&src);
    let img = dir.path().join("fs.sqfs");
    pack_directory(&MksquashfsArgs {
        source: src.clone(),
        dest: img.clone(),
        exclude: vec!["a/b/c".into()],
    })
    .unwrap();
    let tree = MemTree::load(&img, 0).unwrap();
    let a = tree.lookup(1, "a".as_ref()).unwrap();
    let b = tree.lookup(a, "b".as_ref()).unwrap();
    assert!(tree.lookup(b, "c".as_ref()).is_none(), "excluded path was packed");
    let f = tree.lookup(b, "indirect".as_ref()).unwrap();
    assert_eq!(tree.entry(f).unwrap().kind, NodeKind::File(fs::read(src.join("a/b/indirect")).unwrap()));
    let l = tree.lookup(1, "long-link".as_ref()).unwrap();
    assert_eq!(tree.entry(l).unwrap().kind, NodeKind::Symlink("x".repeat(100).into()));
    let one = tree.lookup(1, "one".as_ref()).unwrap();
    assert_eq!(tree.entry(one).unwrap().mode & 0o7777, 0o640);
}

#[test]
fn fuse2fs_refuses_writable_mounts() {
    let args = |v: &[&str]| parse_fuse2fs_args(&v.iter().map(Into::into).collect::<Vec<_>>());
    assert!(args(&["img", "mnt", "-o", "fakeroot"]).is_err());
    assert!(args(&["img", "mnt"]).is_err());
    let ok = args(&["img", "mnt", "-o", "ro", "-f"]).unwrap();
    assert_eq!(ok.image, Path::new("img"));
}
