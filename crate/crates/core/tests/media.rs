use std::collections::BTreeMap;

use sgnet::data::{Manifest, ShotRecord, Split};
use sgnet::fixtures::{self, DatasetSpec};
use sgnet::media::{
    BlockMatchFlow, FlowBackend, MediaStore, Preprocess, SamplingConfig, SamplingMode, Transform,
};
use sgnet::Error;

fn record(id: &str, uri: &str, frames: u64) -> ShotRecord {
    ShotRecord {
        shot_id: id.into(),
        media_uri: uri.into(),
        frame_start: 0,
        frame_end: frames,
        fps: 24.0,
        scale: None,
        movement: None,
        split: Split::Predict,
        extra: BTreeMap::new(),
    }
}

fn store() -> MediaStore {
    MediaStore::new(Preprocess::scaled(32), FlowBackend::default()).unwrap()
}

#[test]
fn solid_video_decodes_to_constant_frames() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gray.srv");
    fixtures::solid_video(&path, 40, 30, 4, 128).unwrap();
    let r = record("g", path.to_str().unwrap(), 4);
    for f in store().decode_frames(&r, &[0, 3]).unwrap() {
        assert_eq!(f.dims(), (32, 32));
        assert!(f.data.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
    }
}

#[test]
fn numbered_frame_marker_survives_preprocessing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("num.srv");
    fixtures::numbered_video(&path, 48, 48, 40).unwrap();
    let r = record("n", path.to_str().unwrap(), 40);
    let s = store();
    let frames = s.decode_frames(&r, &[5, 17, 39]).unwrap();
    let decoded: Vec<u64> = frames.iter().map(fixtures::decode_frame_number).collect();
    assert_eq!(decoded, vec![5, 17, 39]);
    assert!(matches!(s.decode_frames(&r, &[40]), Err(Error::IndexOutOfRange { index: 40, start: 0, end: 40 })));
}

#[test]
fn shot_span_beyond_media_is_unreadable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.srv");
    fixtures::solid_video(&path, 8, 8, 3, 0).unwrap();
    let r = record("s", path.to_str().unwrap(), 10);
    assert!(matches!(store().decode_frames(&r, &[0]), Err(Error::MediaUnreadable { .. })));
    let missing = record("m", dir.path().join("nope.srv").to_str().unwrap(), 1);
    assert!(matches!(store().decode_frames(&missing, &[0]), Err(Error::MediaUnreadable { .. })));
}

#[test]
fn preprocessing_is_idempotent_on_preprocessed_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tex.srv");
    fixtures::translating_texture_video(&path, 32, 32, 2, (1.0, 0.0), 3).unwrap();
    let r = record("t", path.to_str().unwrap(), 2);
    let s = MediaStore::new(Preprocess { input_size: 32, resize_shorter: 32 }, FlowBackend::default()).unwrap();
    let decoded = s.decode_frames(&r, &[1]).unwrap();
    let raw = sgnet::media::open_media(&path).unwrap().read_frame(1).unwrap();
    assert_eq!(decoded[0], raw);
}

#[test]
fn clip_stacks_follow_sampling_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tex.srv");
    fixtures::translating_texture_video(&path, 48, 48, 30, (1.0, 0.0), 9).unwrap();
    let r = record("t", path.to_str().unwrap(), 30);
    let s = store();

    let train = s.build_clip_stack(&r, &SamplingConfig::train(), 5).unwrap();
    assert_eq!((train.n_clips, train.frames_per_clip_rgb()), (3, 1));
    assert!(train.flow.is_none());
    assert!(train.anchors.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(train.rgb_tensor::<f32>().unwrap().shape(), &[3, 3, 32, 32]);

    let test = s.build_clip_stack(&r, &SamplingConfig::test(), 0).unwrap();
    assert_eq!(test.n_clips, 25);
    assert_eq!(test.transform, Transform::center(test.resized, 32));

    let with_flow = s.build_clip_stack(&r, &SamplingConfig::train().with_flow(true), 5).unwrap();
    let flow = with_flow.flow.as_ref().unwrap();
    assert!(flow.iter().all(|c| c.len() == 5));
    assert_eq!(with_flow.flow_tensor::<f32>().unwrap().shape(), &[3, 10, 32, 32]);
    assert_eq!(with_flow.rgb, train.rgb);
}

#[test]
fn flow_of_translating_fixture_points_along_motion() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tex.srv");
    fixtures::translating_texture_video(&path, 48, 48, 8, (2.0, 0.0), 1).unwrap();
    let r = record("t", path.to_str().unwrap(), 8);
    let cfg = SamplingConfig::new(1, SamplingMode::TestUniform).with_flow(true);
    let stack = store().build_clip_stack(&r, &cfg, 0).unwrap();
    let field = &stack.flow.as_ref().unwrap()[0][0];
    let mut dx = field.dx().to_vec();
    dx.sort_by(f32::total_cmp);
    // 2 px at 48 wide becomes about 1.54 px after resizing to 37.
    let median = dx[dx.len() / 2];
    assert!((median - 2.0 * 37.0 / 48.0).abs() < 0.5, "median dx {median}");
}

#[test]
fn one_frame_shot_duplicates_rgb_and_has_zero_flow() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.srv");
    fixtures::translating_texture_video(&path, 48, 48, 1, (1.0, 0.0), 2).unwrap();
    let r = record("o", path.to_str().unwrap(), 1);
    let stack = store().build_clip_stack(&r, &SamplingConfig::train().with_flow(true), 1).unwrap();
    assert!(stack.rgb.iter().all(|c| c[0] == stack.rgb[0][0]));
    assert!(stack.flow.unwrap().iter().flatten().all(|f| f.max_magnitude() == 0.0));
}

#[test]
fn precomputed_flow_backend_reads_flo2_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tex.srv");
    fixtures::translating_texture_video(&path, 48, 48, 4, (1.0, 0.0), 2).unwrap();
    let r = record("p", path.to_str().unwrap(), 4);
    let est = BlockMatchFlow::default();
    let src = sgnet::media::open_media(&path).unwrap();
    for i in 0..3 {
        use sgnet::media::FlowEstimator;
        let f = est.estimate(&src.read_frame(i).unwrap(), &src.read_frame(i + 1).unwrap()).unwrap();
        sgnet::media::flow::write_flo2(sgnet::media::flow::flo2_path(dir.path(), "p", i), &f).unwrap();
    }
    let s = MediaStore::new(Preprocess::scaled(32), FlowBackend::Precomputed { dir: dir.path().into() }).unwrap();
    let cfg = SamplingConfig { frames_per_clip_flow: 3, ..SamplingConfig::new(1, SamplingMode::TestUniform) }.with_flow(true);
    let stack = s.build_clip_stack(&r, &cfg, 0).unwrap();
    assert_eq!(stack.flow.unwrap()[0].len(), 3);

    let missing = record("q", path.to_str().unwrap(), 4);
    assert!(s.build_clip_stack(&missing, &cfg, 0).is_err());
}

#[test]
fn fixture_dataset_manifest_matches_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec { frames: 4, ..DatasetSpec::small(11) };
    let ds = fixtures::generate_dataset(dir.path(), &spec).unwrap();

    let text = std::fs::read_to_string(&ds.manifest_path).unwrap();
    let train_lines = text.lines().filter(|l| l.contains(r#""split":"train""#)).count();
    let parsed = Manifest::parse_file(&ds.manifest_path).unwrap();
    assert_eq!(parsed.len(), 40);
    assert_eq!(parsed.split_view(Split::Train).len(), train_lines);
    assert_eq!(train_lines, 28);
    assert_eq!((parsed.count(Split::Val), parsed.count(Split::Test)), (4, 8));
    assert!(fixtures::map_path(&ds.maps_dir, "shot0000", 3).exists());

    let s = MediaStore::for_manifest(&parsed, Preprocess::scaled(32), FlowBackend::default()).unwrap();
    let frames = s.decode_frames(&parsed.records()[0], &[0]).unwrap();
    assert!(frames[0].data.iter().all(|v| (0.0..=1.0).contains(v)));
}
