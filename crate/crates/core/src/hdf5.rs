//! Minimal read-only HDF5 support for ingesting scanner exports.
//!
//! Covers the subset that standard writers emit for plain array datasets:
//! version-0 superblocks, version-1 object headers (with continuation
//! blocks), symbol-table groups, and datasets that are either contiguous or
//! chunked (optionally deflate-compressed). Element types: little-endian
//! f32/f64 and the conventional complex64/complex128 compound pairs.
//! Anything outside this subset fails with a descriptive [`Error::CorruptFile`].

use crate::error::{Error, Result};
use std::path::Path;

const SIGNATURE: [u8; 8] = [0x89, b'H', b'D', b'F', b'\r', b'\n', 0x1a, b'\n'];
const UNDEFINED: u64 = u64::MAX;

/// A decoded dataset: row-major dims plus real (and, for complex sources,
/// imaginary) samples widened to f64.
#[derive(Debug)]
pub(crate) struct H5Volume {
    pub dims: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Option<Vec<f64>>,
}

struct Reader {
    buf: Vec<u8>,
    path: String,
}

#[derive(Clone, Copy, PartialEq)]
enum ElemType {
    F32,
    F64,
    Complex64,
    Complex128,
}

impl ElemType {
    fn size(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::F64 => 8,
            ElemType::Complex64 => 8,
            ElemType::Complex128 => 16,
        }
    }
}

struct DatasetInfo {
    dims: Vec<usize>,
    elem: Option<ElemType>,
    /// (address, byte length) for contiguous storage.
    contiguous: Option<(u64, u64)>,
    /// (b-tree address, chunk dims in elements) for chunked storage.
    chunked: Option<(u64, Vec<usize>)>,
    deflate: bool,
}

impl Reader {
    fn corrupt(&self, why: &str) -> Error {
        Error::CorruptFile(format!("{}: {why}", self.path))
    }

    fn span(&self, off: usize, len: usize, what: &str) -> Result<&[u8]> {
        self.buf
            .get(off..off + len)
            .ok_or_else(|| self.corrupt(&format!("truncated {what} at offset {off}")))
    }

    fn u16(&self, off: usize) -> Result<u16> {
        Ok(u16::from_le_bytes(self.span(off, 2, "u16")?.try_into().unwrap()))
    }

    fn u32(&self, off: usize) -> Result<u32> {
        Ok(u32::from_le_bytes(self.span(off, 4, "u32")?.try_into().unwrap()))
    }

    fn u64(&self, off: usize) -> Result<u64> {
        Ok(u64::from_le_bytes(self.span(off, 8, "u64")?.try_into().unwrap()))
    }

    /// Validates the superblock and returns the root group's object header
    /// address.
    fn root_header(&self) -> Result<u64> {
        if self.span(0, 8, "signature")? != SIGNATURE {
            return Err(self.corrupt("not an HDF5 file"));
        }
        let version = self.buf[8];
        if version != 0 {
            return Err(self.corrupt(&format!("unsupported superblock version {version}")));
        }
        if self.buf[13] != 8 || self.buf[14] != 8 {
            return Err(self.corrupt("unsupported offset/length width"));
        }
        // superblock v0: 24-byte prefix, four 8-byte file addresses, then
        // the root symbol-table entry (name offset, object header address)
        self.u64(56 + 8)
    }

    /// Collects `(link name, object header address)` for every link in the
    /// symbol-table group whose header sits at `addr`.
    fn group_links(&self, addr: u64) -> Result<Vec<(String, u64)>> {
        let mut btree = None;
        let mut heap = None;
        self.walk_messages(addr, &mut |reader, msg_type, body| {
            if msg_type == 0x0011 {
                btree = Some(reader.u64(body)?);
                heap = Some(reader.u64(body + 8)?);
            }
            Ok(())
        })?;
        let (btree, heap) = match (btree, heap) {
            (Some(b), Some(h)) => (b, h),
            _ => return Err(self.corrupt("group without symbol table")),
        };
        let heap_data = self.local_heap_data(heap)?;
        let mut links = Vec::new();
        self.walk_group_btree(btree, heap_data, &mut links)?;
        Ok(links)
    }

    fn local_heap_data(&self, addr: u64) -> Result<u64> {
        let a = addr as usize;
        if self.span(a, 4, "heap")? != b"HEAP" {
            return Err(self.corrupt("bad local heap signature"));
        }
        // HEAP: signature, version, 3 reserved, segment size, free list, data address
        self.u64(a + 24)
    }

    fn walk_group_btree(
        &self,
        addr: u64,
        heap_data: u64,
        links: &mut Vec<(String, u64)>,
    ) -> Result<()> {
        let a = addr as usize;
        if self.span(a, 4, "btree")? != b"TREE" {
            return Err(self.corrupt("bad b-tree signature"));
        }
        if self.buf[a + 4] != 0 {
            return Err(self.corrupt("unexpected b-tree node type in group"));
        }
        let level = self.buf[a + 5];
        let entries = self.u16(a + 6)? as usize;
        // keys and children alternate after the two sibling pointers;
        // group keys are heap offsets (one offset width each)
        let mut off = a + 8 + 16 + 8; // header + siblings + leading key
        for _ in 0..entries {
            let child = self.u64(off)?;
            if level > 0 {
                self.walk_group_btree(child, heap_data, links)?;
            } else {
                self.read_symbol_node(child, heap_data, links)?;
            }
            off += 16; // child + trailing key
        }
        Ok(())
    }

    fn read_symbol_node(
        &self,
        addr: u64,
        heap_data: u64,
        links: &mut Vec<(String, u64)>,
    ) -> Result<()> {
        let a = addr as usize;
        if self.span(a, 4, "symbol node")? != b"SNOD" {
            return Err(self.corrupt("bad symbol node signature"));
        }
        let n = self.u16(a + 6)? as usize;
        for i in 0..n {
            let e = a + 8 + i * 40;
            let name_off = self.u64(e)?;
            let header = self.u64(e + 8)?;
            let start = (heap_data + name_off) as usize;
            let bytes = self
                .buf
                .get(start..)
                .and_then(|s| s.split(|&b| b == 0).next())
                .ok_or_else(|| self.corrupt("link name outside heap"))?;
            links.push((String::from_utf8_lossy(bytes).into_owned(), header));
        }
        Ok(())
    }

    /// Iterates version-1 object header messages, following continuation
    /// blocks, handing `(type, body offset)` to the callback.
    fn walk_messages(
        &self,
        addr: u64,
        f: &mut dyn FnMut(&Reader, u16, usize) -> Result<()>,
    ) -> Result<()> {
        let a = addr as usize;
        let version = *self
            .buf
            .get(a)
            .ok_or_else(|| self.corrupt("object header outside file"))?;
        if version != 1 {
            return Err(self.corrupt(&format!("unsupported object header version {version}")));
        }
        let total = self.u16(a + 2)? as usize;
        // (block start, block length); the first block begins after the
        // 12-byte prefix plus 4 alignment bytes
        let mut blocks = vec![(a + 16, self.u32(a + 8)? as usize)];
        let mut seen = 0usize;
        while let Some((start, len)) = blocks.pop() {
            let mut off = start;
            let end = start + len;
            while off + 8 <= end && seen < total {
                let msg_type = self.u16(off)?;
                let size = self.u16(off + 2)? as usize;
                let body = off + 8;
                if body + size > end {
                    return Err(self.corrupt("message overruns header block"));
                }
                if msg_type == 0x0010 {
                    let cont = self.u64(body)?;
                    let clen = self.u64(body + 8)? as usize;
                    blocks.push((cont as usize, clen));
                } else {
                    f(self, msg_type, body)?;
                }
                seen += 1;
                off = body + size;
            }
        }
        Ok(())
    }

    fn parse_dataspace(&self, body: usize) -> Result<Vec<usize>> {
        let version = self.buf[body];
        if version != 1 {
            return Err(self.corrupt(&format!("unsupported dataspace version {version}")));
        }
        let rank = self.buf[body + 1] as usize;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            dims.push(self.u64(body + 8 + 8 * i)? as usize);
        }
        Ok(dims)
    }

    fn parse_datatype(&self, body: usize) -> Result<ElemType> {
        let class = self.buf[body] & 0x0f;
        let bits0 = self.buf[body + 1];
        let size = self.u32(body + 4)? as usize;
        match (class, size) {
            (1, 4) | (1, 8) => {
                if bits0 & 0x01 != 0 {
                    return Err(self.corrupt("big-endian floats not supported"));
                }
                Ok(if size == 4 { ElemType::F32 } else { ElemType::F64 })
            }
            // the conventional complex encodings: a two-member float compound
            (6, 8) => Ok(ElemType::Complex64),
            (6, 16) => Ok(ElemType::Complex128),
            _ => Err(self.corrupt(&format!("unsupported datatype class {class} size {size}"))),
        }
    }

    fn dataset_info(&self, addr: u64) -> Result<DatasetInfo> {
        let mut info = DatasetInfo {
            dims: Vec::new(),
            elem: None,
            contiguous: None,
            chunked: None,
            deflate: false,
        };
        let this = &mut info;
        self.walk_messages(addr, &mut |reader, msg_type, body| {
            match msg_type {
                0x0001 => this.dims = reader.parse_dataspace(body)?,
                0x0003 => this.elem = Some(reader.parse_datatype(body)?),
                0x0008 => {
                    let version = reader.buf[body];
                    if version != 3 {
                        return Err(reader
                            .corrupt(&format!("unsupported data layout version {version}")));
                    }
                    match reader.buf[body + 1] {
                        1 => {
                            this.contiguous =
                                Some((reader.u64(body + 2)?, reader.u64(body + 10)?));
                        }
                        2 => {
                            let ndims = reader.buf[body + 2] as usize;
                            let btree = reader.u64(body + 3)?;
                            // the trailing "dimension" is the element size
                            let mut cdims = Vec::with_capacity(ndims - 1);
                            for i in 0..ndims - 1 {
                                cdims.push(reader.u32(body + 11 + 4 * i)? as usize);
                            }
                            this.chunked = Some((btree, cdims));
                        }
                        class => {
                            return Err(reader
                                .corrupt(&format!("unsupported data layout class {class}")));
                        }
                    }
                }
                0x000B => {
                    let nf = reader.buf[body + 1] as usize;
                    let mut off = body + 8;
                    for _ in 0..nf {
                        let id = reader.u16(off)?;
                        if id != 1 {
                            return Err(
                                reader.corrupt(&format!("unsupported filter id {id}"))
                            );
                        }
                        this.deflate = true;
                        let name_len = reader.u16(off + 2)? as usize;
                        let nvals = reader.u16(off + 6)? as usize;
                        let padded_vals = nvals + (nvals & 1);
                        off += 8 + name_len.div_ceil(8) * 8 + 4 * padded_vals;
                    }
                }
                _ => {}
            }
            Ok(())
        })?;
        Ok(info)
    }

    fn decode(&self, elem: ElemType, bytes: &[u8], re: &mut Vec<f64>, im: &mut Vec<f64>) {
        match elem {
            ElemType::F32 => {
                for c in bytes.chunks_exact(4) {
                    re.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                }
            }
            ElemType::F64 => {
                for c in bytes.chunks_exact(8) {
                    re.push(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
            ElemType::Complex64 => {
                for c in bytes.chunks_exact(8) {
                    re.push(f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64);
                    im.push(f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64);
                }
            }
            ElemType::Complex128 => {
                for c in bytes.chunks_exact(16) {
                    re.push(f64::from_le_bytes(c[0..8].try_into().unwrap()));
                    im.push(f64::from_le_bytes(c[8..16].try_into().unwrap()));
                }
            }
        }
    }

    fn read_contiguous(&self, info: &DatasetInfo) -> Result<(Vec<f64>, Vec<f64>)> {
        let (addr, len) = info.contiguous.unwrap();
        if addr == UNDEFINED {
            return Err(self.corrupt("dataset has no allocated storage"));
        }
        let elem = info.elem.unwrap();
        let n: usize = info.dims.iter().product();
        if (len as usize) < n * elem.size() {
            return Err(self.corrupt("contiguous storage smaller than dataspace"));
        }
        let bytes = self.span(addr as usize, n * elem.size(), "dataset payload")?;
        let (mut re, mut im) = (Vec::with_capacity(n), Vec::new());
        self.decode(elem, bytes, &mut re, &mut im);
        Ok((re, im))
    }

    fn read_chunked(&self, info: &DatasetInfo) -> Result<(Vec<f64>, Vec<f64>)> {
        let (btree, cdims) = info.chunked.as_ref().unwrap();
        let elem = info.elem.unwrap();
        if cdims.len() != info.dims.len() {
            return Err(self.corrupt("chunk rank differs from dataspace rank"));
        }
        let n: usize = info.dims.iter().product();
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; if matches!(elem, ElemType::Complex64 | ElemType::Complex128) { n } else { 0 }];
        self.walk_chunk_btree(*btree, info, &mut re, &mut im)?;
        Ok((re, im))
    }

    fn walk_chunk_btree(
        &self,
        addr: u64,
        info: &DatasetInfo,
        re: &mut [f64],
        im: &mut [f64],
    ) -> Result<()> {
        let a = addr as usize;
        if self.span(a, 4, "chunk b-tree")? != b"TREE" {
            return Err(self.corrupt("bad chunk b-tree signature"));
        }
        if self.buf[a + 4] != 1 {
            return Err(self.corrupt("unexpected b-tree node type for chunks"));
        }
        let level = self.buf[a + 5];
        let entries = self.u16(a + 6)? as usize;
        let rank = info.dims.len();
        // key: chunk byte size, filter mask, then rank+1 chunk offsets
        let key_len = 8 + 8 * (rank + 1);
        let mut off = a + 24;
        for _ in 0..entries {
            let chunk_bytes = self.u32(off)? as usize;
            let mut start = Vec::with_capacity(rank);
            for d in 0..rank {
                start.push(self.u64(off + 8 + 8 * d)? as usize);
            }
            let child = self.u64(off + key_len)?;
            if level > 0 {
                self.walk_chunk_btree(child, info, re, im)?;
            } else {
                self.place_chunk(child, chunk_bytes, &start, info, re, im)?;
            }
            off += key_len + 8;
        }
        Ok(())
    }

    fn place_chunk(
        &self,
        addr: u64,
        stored_len: usize,
        start: &[usize],
        info: &DatasetInfo,
        re: &mut [f64],
        im: &mut [f64],
    ) -> Result<()> {
        let elem = info.elem.unwrap();
        let raw = self.span(addr as usize, stored_len, "chunk")?;
        let owned;
        let bytes: &[u8] = if info.deflate {
            owned = miniz_oxide::inflate::decompress_to_vec_zlib(raw)
                .map_err(|_| self.corrupt("chunk decompression failed"))?;
            &owned
        } else {
            raw
        };
        let cdims = &info.chunked.as_ref().unwrap().1;
        let n_chunk: usize = cdims.iter().product();
        if bytes.len() < n_chunk * elem.size() {
            return Err(self.corrupt("chunk smaller than its dimensions"));
        }
        let (mut cre, mut cim) = (Vec::with_capacity(n_chunk), Vec::new());
        self.decode(elem, &bytes[..n_chunk * elem.size()], &mut cre, &mut cim);
        // scatter the chunk into the full array, clipping the partial
        // chunks at the upper edges
        let dims = &info.dims;
        let rank = dims.len();
        let mut idx = vec![0usize; rank];
        'outer: loop {
            let mut dst = 0usize;
            let mut src = 0usize;
            let mut inside = true;
            for d in 0..rank {
                let gd = start[d] + idx[d];
                if gd >= dims[d] {
                    inside = false;
                }
                dst = dst * dims[d] + gd.min(dims[d] - 1);
                src = src * cdims[d] + idx[d];
            }
            if inside {
                re[dst] = cre[src];
                if !cim.is_empty() {
                    im[dst] = cim[src];
                }
            }
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < cdims[d] {
                    continue 'outer;
                }
                idx[d] = 0;
            }
            break;
        }
        Ok(())
    }
}

/// Opens `path` and reads the first dataset whose link name appears in
/// `names` (in preference order). Returns the matched name and the data.
pub(crate) fn read_volume(path: &Path, names: &[&str]) -> Result<(String, H5Volume)> {
    let buf = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingDataset(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    let r = Reader { buf, path: path.display().to_string() };
    let root = r.root_header()?;
    let links = r.group_links(root)?;
    let (name, addr) = names
        .iter()
        .find_map(|n| links.iter().find(|(l, _)| l == n))
        .map(|(l, a)| (l.clone(), *a))
        .ok_or_else(|| {
            r.corrupt(&format!(
                "no dataset named one of {names:?} (found: {:?})",
                links.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>()
            ))
        })?;
    let info = r.dataset_info(addr)?;
    if info.dims.is_empty() || info.elem.is_none() {
        return Err(r.corrupt(&format!("dataset {name} lacks shape or type")));
    }
    let (re, im) = if info.contiguous.is_some() {
        r.read_contiguous(&info)?
    } else if info.chunked.is_some() {
        r.read_chunked(&info)?
    } else {
        return Err(r.corrupt(&format!("dataset {name} has unsupported storage")));
    };
    let im = if im.is_empty() { None } else { Some(im) };
    Ok((name, H5Volume { dims: info.dims, re, im }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn fixture(name: &str) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
    }

    #[test]
    fn reads_contiguous_float32_volume() {
        let (name, vol) =
            read_volume(&fixture("recon_contiguous.h5"), &["reconstruction_esc"]).unwrap();
        assert_eq!(name, "reconstruction_esc");
        assert_eq!(vol.dims, vec![7, 16, 16]);
        assert!(vol.im.is_none());
        // the generator wrote (i % 251) * 0.25 - 20, exactly representable
        for (i, &v) in vol.re.iter().enumerate() {
            let want = (i % 251) as f64 * 0.25 - 20.0;
            assert_eq!(v, want, "element {i}");
        }
    }

    #[test]
    fn reads_chunked_deflated_volume() {
        let (name, vol) =
            read_volume(&fixture("recon_chunked.h5"), &["reconstruction_esc", "reconstruction_rss"])
                .unwrap();
        assert_eq!(name, "reconstruction_rss");
        assert_eq!(vol.dims, vec![5, 16, 16]);
        for (i, &v) in vol.re.iter().enumerate() {
            let want = ((i as f64 * 7.0) % 509.0) * 0.125 - 30.0;
            assert_eq!(v, want, "element {i}");
        }
    }

    #[test]
    fn reads_complex64_kspace() {
        let (_, vol) = read_volume(&fixture("kspace_complex.h5"), &["kspace"]).unwrap();
        assert_eq!(vol.dims, vec![4, 16, 16]);
        let im = vol.im.as_ref().expect("complex data");
        for i in 0..vol.re.len() {
            let want_re = (i % 127) as f64 * 0.5 - 31.0;
            let want_im = ((i as f64 * 3.0) % 101.0) * 0.25 - 12.0;
            assert_eq!(vol.re[i], want_re, "re {i}");
            assert_eq!(im[i], want_im, "im {i}");
        }
    }

    #[test]
    fn reads_rank_two_float64() {
        let (_, vol) = read_volume(&fixture("plain_f64.h5"), &["reconstruction"]).unwrap();
        assert_eq!(vol.dims, vec![16, 16]);
        for (i, &v) in vol.re.iter().enumerate() {
            assert_eq!(v, i as f64 * 0.0625 - 8.0);
        }
    }

    #[test]
    fn missing_file_and_garbage_are_distinct_errors() {
        assert!(matches!(
            read_volume(&fixture("nope.h5"), &["kspace"]),
            Err(Error::MissingDataset(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.h5");
        std::fs::write(&junk, b"not an hdf5 file at all, definitely").unwrap();
        assert!(matches!(read_volume(&junk, &["kspace"]), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn unknown_dataset_name_reports_available_links() {
        let err = read_volume(&fixture("plain_f64.h5"), &["kspace"]).unwrap_err();
        match err {
            Error::CorruptFile(msg) => assert!(msg.contains("reconstruction"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
