//! Pool convolutional maps into image vectors, write both stores to disk
//! and read records back by image id.
//!
//! cargo run --example feature_store

use ibowimg::features::{gap, write_map_store, write_vector_store, ConvFeatureMap, MapStore, VectorStore};

fn main() -> ibowimg::Result<()> {
    let (h, w, c) = (2, 3, 4);
    let maps: Vec<ConvFeatureMap> = (0..3u64)
        .map(|i| {
            let data = (0..h * w * c).map(|j| (i as f32 + 1.0) * j as f32 / 10.0).collect();
            ConvFeatureMap::new(1000 + i, h, w, c, data)
        })
        .collect::<ibowimg::Result<_>>()?;
    let vectors: Vec<_> = maps.iter().map(gap).collect();

    let dir = tempfile::tempdir().expect("temp dir");
    let vec_path = dir.path().join("features.ibf");
    let map_path = dir.path().join("maps.ibm");
    write_vector_store(&vec_path, c, &vectors)?;
    write_map_store(&map_path, (h, w, c), &maps)?;

    let store = VectorStore::open(&vec_path)?;
    let map_store = MapStore::open(&map_path)?;
    println!("{} vectors of dim {}; maps shaped {:?}", store.len(), store.dim(), map_store.shape());
    for &id in store.ids() {
        let v = store.get_vector(id)?;
        let m = map_store.get_map(id)?;
        println!("  image {id}: pooled {:?}, fiber(0,0) {:?}", v.vector, m.fiber(0, 0));
    }
    match store.get_vector(5) {
        Err(e) => println!("lookup of a missing id fails: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
