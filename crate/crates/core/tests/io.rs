use std::fs;

use cotseg::nifti::{
    find_case_dirs, label_mask_to_nifti, read_case_dir, read_label_dir, read_nifti, write_case_dir, write_nifti, NiftiDType,
    NiftiVolume,
};
use cotseg::synthetic::synthetic_dataset;
use tempfile::TempDir;

#[test]
fn gzip_and_plain_files_read_back() {
    let dir = TempDir::new().unwrap();
    let vol = NiftiVolume::new(vec![3, 4, 5], NiftiDType::I16, [1.0, 1.0, 2.0], (0..60).map(f64::from).collect()).unwrap();
    for name in ["a.nii", "a.nii.gz"] {
        let path = dir.path().join(name);
        write_nifti(&vol, &path).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.dims, vol.dims);
        assert_eq!(back.data, vol.data);
        assert_eq!(back.spacing, vol.spacing);
    }
    let gz = fs::read(dir.path().join("a.nii.gz")).unwrap();
    assert_eq!(&gz[..2], &[0x1f, 0x8b]);
}

#[test]
fn truncated_file_names_the_failure() {
    let dir = TempDir::new().unwrap();
    let vol = NiftiVolume::new(vec![4, 4, 4], NiftiDType::F32, [1.0; 3], vec![0.5; 64]).unwrap();
    let path = dir.path().join("t.nii");
    write_nifti(&vol, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    let err = read_nifti(&path).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");
}

#[test]
fn case_directories_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = synthetic_dataset(2, 3, [12, 10, 8]).unwrap();
    for (vol, mask) in &data {
        write_case_dir(dir.path(), vol, Some(mask)).unwrap();
    }
    let found = find_case_dirs(dir.path()).unwrap();
    assert_eq!(found.len(), 2);
    for ((vol, mask), path) in data.iter().zip(&found) {
        let case = read_case_dir(path).unwrap();
        assert_eq!(case.volume.case_id, vol.case_id);
        assert_eq!(case.volume.dims, vol.dims);
        assert_eq!(case.truth.as_ref(), Some(mask));
        // images are stored as float32
        for c in 0..4 {
            for (a, b) in case.volume.channels[c].iter().zip(&vol.channels[c]) {
                assert_eq!(*a, f64::from(*b as f32));
            }
        }
    }
    // a single case directory is its own dataset
    assert_eq!(find_case_dirs(&found[0]).unwrap(), vec![found[0].clone()]);

    let labels = read_label_dir(dir.path()).unwrap();
    assert_eq!(labels.len(), 2);
    assert_eq!(labels[1].1, data[1].1);
}

#[test]
fn label_files_keep_template_geometry() {
    let dir = TempDir::new().unwrap();
    let (vol, mask) = synthetic_dataset(1, 9, [8, 8, 8]).unwrap().remove(0);
    let case_dir = write_case_dir(dir.path(), &vol, Some(&mask)).unwrap();
    let case = read_case_dir(&case_dir).unwrap();
    let out = label_mask_to_nifti(&mask, [2.0, 2.0, 2.0], Some(&case.template));
    assert_eq!(out.spacing, [2.0, 2.0, 2.0]);
    let path = dir.path().join("pred").join(format!("{}.nii.gz", vol.case_id));
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_nifti(&out, &path).unwrap();
    let read = read_label_dir(path.parent().unwrap()).unwrap();
    assert_eq!(read[0].0, vol.case_id);
    assert_eq!(read[0].1, mask);
    assert_eq!(read[0].2.spacing, [2.0, 2.0, 2.0]);
}

#[test]
fn empty_dataset_is_an_error() {
    let dir = TempDir::new().unwrap();
    assert!(find_case_dirs(dir.path()).is_err());
    assert!(find_case_dirs(dir.path().join("missing")).is_err());
}
