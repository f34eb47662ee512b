//! Minimal big-endian payload encoding.

use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::homcrypto::HomCiphertext;

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u128(&mut self, v: u128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.u32(bytes.len() as u32);
        self.raw(bytes)
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn biguint(&mut self, v: &BigUint) -> &mut Self {
        self.bytes(&v.to_bytes_be())
    }

    /// Integer padded to `width` bytes so equal-width values encode to
    /// equal lengths.
    pub fn biguint_fixed(&mut self, v: &BigUint, width: usize) -> &mut Self {
        let bytes = v.to_bytes_be();
        debug_assert!(bytes.len() <= width);
        self.u32(width as u32);
        self.buf.resize(self.buf.len() + width.saturating_sub(bytes.len()), 0);
        self.raw(&bytes)
    }

    pub fn cipher(&mut self, c: &HomCiphertext, width: usize) -> &mut Self {
        c.encode_into(width, &mut self.buf);
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
}

fn short() -> Error {
    Error::Protocol("message payload too short".into())
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(short());
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.raw(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.raw(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Protocol(format!("invalid boolean byte {v}"))),
        }
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_be_bytes(self.array()?))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.raw(n)
    }

    pub fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Protocol("invalid utf-8 string".into()))
    }

    pub fn biguint(&mut self) -> Result<BigUint> {
        Ok(BigUint::from_bytes_be(self.bytes()?))
    }

    pub fn cipher(&mut self) -> Result<HomCiphertext> {
        let (c, used) = HomCiphertext::decode(self.buf).map_err(|_| short())?;
        self.buf = &self.buf[used..];
        Ok(c)
    }

    pub fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Protocol(format!("{} trailing payload bytes", self.buf.len())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_scalars() {
        let bytes = Encoder::new()
            .u8(9)
            .bool(true)
            .u32(7)
            .u64(1 << 40)
            .u128(u128::MAX)
            .str("X1")
            .biguint(&BigUint::from(300u32))
            .biguint_fixed(&BigUint::from(5u32), 8)
            .finish();
        let mut d = Decoder::new(&bytes);
        assert_eq!(d.u8().unwrap(), 9);
        assert!(d.bool().unwrap());
        assert_eq!(d.u32().unwrap(), 7);
        assert_eq!(d.u64().unwrap(), 1 << 40);
        assert_eq!(d.u128().unwrap(), u128::MAX);
        assert_eq!(d.string().unwrap(), "X1");
        assert_eq!(d.biguint().unwrap(), BigUint::from(300u32));
        assert_eq!(d.biguint().unwrap(), BigUint::from(5u32));
        d.finish().unwrap();
        assert!(d.u8().is_err());
    }
}
