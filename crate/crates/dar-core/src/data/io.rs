//! Flat binary dump/load for generated datasets.
//!
//! Layout (little-endian): 8-byte magic `DARDATA\x01`, a length-prefixed
//! UTF-8 `key=value` config echo, then the four splits in train/target/val/
//! test order, each as a `u32` count followed by per-example rows of
//! `f32` image pixels, an `i32` label, and an `i32` attribute.

use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, DatasetSplits, DominoExample, GenConfig, PanelMode};

const MAGIC: &[u8; 8] = b"DARDATA\x01";

fn config_echo(cfg: &GenConfig, seed: u64) -> String {
    let mode = match cfg.mode {
        PanelMode::Stacked => "stacked",
        PanelMode::Overlap => "overlap",
    };
    format!(
        "classes={}\npanel={}\nmode={}\ntrain={}\ntarget={}\nval={}\ntest={}\nspurious_strength={}\nnoise_core={}\nnoise_spu={}\nseed={}\n",
        cfg.classes,
        cfg.panel,
        mode,
        cfg.train,
        cfg.target,
        cfg.val,
        cfg.test,
        cfg.spurious_strength,
        cfg.noise_core,
        cfg.noise_spu,
        seed
    )
}

fn parse_echo(echo: &str) -> Result<(GenConfig, u64), DataError> {
    let mut cfg = GenConfig::default();
    let mut seed = 0u64;
    for line in echo.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::Format(format!("bad config line {:?}", line)))?;
        let bad = |_| DataError::Format(format!("bad value for {}: {:?}", k, v));
        match k {
            "classes" => cfg.classes = v.parse().map_err(bad)?,
            "panel" => cfg.panel = v.parse().map_err(bad)?,
            "mode" => {
                cfg.mode = match v {
                    "stacked" => PanelMode::Stacked,
                    "overlap" => PanelMode::Overlap,
                    _ => return Err(DataError::Format(format!("unknown mode {:?}", v))),
                }
            }
            "train" => cfg.train = v.parse().map_err(bad)?,
            "target" => cfg.target = v.parse().map_err(bad)?,
            "val" => cfg.val = v.parse().map_err(bad)?,
            "test" => cfg.test = v.parse().map_err(bad)?,
            "spurious_strength" => cfg.spurious_strength = v.parse().map_err(|_| DataError::Format(format!("bad value for {}: {:?}", k, v)))?,
            "noise_core" => cfg.noise_core = v.parse().map_err(|_| DataError::Format(format!("bad value for {}: {:?}", k, v)))?,
            "noise_spu" => cfg.noise_spu = v.parse().map_err(|_| DataError::Format(format!("bad value for {}: {:?}", k, v)))?,
            "seed" => seed = v.parse().map_err(|_| DataError::Format(format!("bad value for {}: {:?}", k, v)))?,
            _ => return Err(DataError::Format(format!("unknown config key {:?}", k))),
        }
    }
    Ok((cfg, seed))
}

fn write_split(w: &mut impl Write, split: &[DominoExample]) -> Result<(), DataError> {
    w.write_all(&(split.len() as u32).to_le_bytes())?;
    for ex in split {
        for &px in &ex.image {
            w.write_all(&px.to_le_bytes())?;
        }
        w.write_all(&(ex.label as i32).to_le_bytes())?;
        w.write_all(&(ex.attribute as i32).to_le_bytes())?;
    }
    Ok(())
}

fn read_split(r: &mut impl Read, image_len: usize) -> Result<Vec<DominoExample>, DataError> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut raw = vec![0u8; image_len * 4];
        r.read_exact(&mut raw)?;
        let image = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        r.read_exact(&mut b4)?;
        let label = i32::from_le_bytes(b4);
        r.read_exact(&mut b4)?;
        let attribute = i32::from_le_bytes(b4);
        if label < 0 || attribute < 0 {
            return Err(DataError::Format("negative label or attribute".into()));
        }
        out.push(DominoExample { image, label: label as usize, attribute: attribute as usize });
    }
    Ok(out)
}

pub fn dump(splits: &DatasetSplits, path: &Path) -> Result<(), DataError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let echo = config_echo(&splits.config, splits.seed);
    w.write_all(&(echo.len() as u32).to_le_bytes())?;
    w.write_all(echo.as_bytes())?;
    for split in [&splits.train, &splits.target, &splits.val, &splits.test] {
        write_split(&mut w, split)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DatasetSplits, DataError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::Format(format!("bad magic {:?}", magic)));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let mut echo = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut echo)?;
    let echo = String::from_utf8(echo).map_err(|e| DataError::Format(e.to_string()))?;
    let (config, seed) = parse_echo(&echo)?;
    let image_len = config.image_len();
    Ok(DatasetSplits {
        train: read_split(&mut r, image_len)?,
        target: read_split(&mut r, image_len)?,
        val: read_split(&mut r, image_len)?,
        test: read_split(&mut r, image_len)?,
        config,
        seed,
    })
}
