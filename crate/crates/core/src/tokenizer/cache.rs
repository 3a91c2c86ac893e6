// Token cache lines:
//   SVITTOKENS 1
//   image <id> patch <P> tokens <n>
//   token <k> background <0|1> geometry <x_min> <y_min> <x_max> <y_max> <size>
//   patch <P·P·3 values, row-major RGB>
// Values use the shortest representation that parses back exactly.

use std::fmt::Write as _;

use super::{Geometry, Patch, SegmentToken, TokenizedImage};
use crate::error::{Result, SvitError};
use crate::scalar::Scalar;

const MAGIC: &str = "SVITTOKENS";

pub fn write_token_cache<T: Scalar>(t: &TokenizedImage<T>) -> Vec<u8> {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} 1");
    let _ = writeln!(s, "image {} patch {} tokens {}", t.image_id, t.patch_size, t.tokens.len());
    for (k, tok) in t.tokens.iter().enumerate() {
        let g = tok.geometry.to_array();
        let _ = writeln!(
            s,
            "token {k} background {} geometry {} {} {} {} {}",
            u8::from(tok.is_background),
            g[0],
            g[1],
            g[2],
            g[3],
            g[4]
        );
        s.push_str("patch");
        for v in tok.patch.data() {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s.into_bytes()
}

fn parse<V: std::str::FromStr>(s: &str, what: &str) -> Result<V> {
    s.parse()
        .map_err(|_| SvitError::format(format!("bad {what} {s:?} in token cache")))
}

pub fn read_token_cache<T: Scalar>(bytes: &[u8]) -> Result<TokenizedImage<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| SvitError::format(e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some("SVITTOKENS 1") {
        return Err(SvitError::format("missing SVITTOKENS 1 header"));
    }
    let head: Vec<&str> = lines
        .next()
        .ok_or_else(|| SvitError::format("missing image line"))?
        .split_whitespace()
        .collect();
    let (id, p, n) = match head.as_slice() {
        ["image", id, "patch", p, "tokens", n] => {
            (id.to_string(), parse::<usize>(p, "patch size")?, parse::<usize>(n, "token count")?)
        }
        _ => return Err(SvitError::format("malformed image line in token cache")),
    };
    let mut tokens = Vec::with_capacity(n);
    for k in 0..n {
        let tl: Vec<&str> = lines
            .next()
            .ok_or_else(|| SvitError::format(format!("missing token {k}")))?
            .split_whitespace()
            .collect();
        let (bg, geom) = match tl.as_slice() {
            ["token", idx, "background", bg, "geometry", g @ ..] if g.len() == 5 => {
                if parse::<usize>(idx, "token index")? != k {
                    return Err(SvitError::format(format!("token index out of order at {k}")));
                }
                let mut a = [T::zero(); 5];
                for (o, s) in a.iter_mut().zip(g) {
                    *o = parse(s, "geometry value")?;
                }
                (*bg == "1", Geometry::from_array(a))
            }
            _ => return Err(SvitError::format(format!("malformed token line {k}"))),
        };
        let pl = lines
            .next()
            .ok_or_else(|| SvitError::format(format!("missing patch for token {k}")))?;
        let mut fields = pl.split_whitespace();
        if fields.next() != Some("patch") {
            return Err(SvitError::format(format!("malformed patch line for token {k}")));
        }
        let data = fields.map(|s| parse::<T>(s, "patch value")).collect::<Result<Vec<T>>>()?;
        let patch = Patch::from_data(p, p, data)
            .ok_or_else(|| SvitError::format(format!("patch size mismatch at token {k}")))?;
        tokens.push(SegmentToken {
            patch,
            geometry: geom,
            is_background: bg,
        });
    }
    if lines.next().is_some() {
        return Err(SvitError::format("trailing data in token cache"));
    }
    Ok(TokenizedImage {
        image_id: id,
        patch_size: p,
        tokens,
    })
}
