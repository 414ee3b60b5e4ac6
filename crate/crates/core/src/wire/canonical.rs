//! Canonical JSON encoding: lexicographically sorted keys, no insignificant
//! whitespace, UTF-8, shortest round-trip decimals for reals, base64 for
//! binary fields. Hashes and signatures are always computed over these bytes,
//! so the encoding must be identical across processes and platforms.
//!
//! Unlike `serde_json::Value`, the intermediate tree below keeps `f32` and
//! `f64` apart, so matrices serialized at 32-bit precision print the shortest
//! decimal of the *f32* value.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::ser::{self, Serialize};

use super::WireError;

pub fn to_canonical_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, WireError> {
    let tree = value.serialize(CanonSerializer)?;
    let mut out = Vec::new();
    write_value(&tree, &mut out)?;
    Ok(out)
}

/// Parsing is plain JSON; canonical bytes are a subset of JSON.
pub fn from_canonical_bytes<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, WireError> {
    Ok(serde_json::from_slice(bytes)?)
}

#[derive(Debug, Clone)]
enum CanonValue {
    Null,
    Bool(bool),
    UInt(u64),
    Int(i64),
    F32(f32),
    F64(f64),
    Str(String),
    Bytes(Vec<u8>),
    Seq(Vec<CanonValue>),
    Map(BTreeMap<String, CanonValue>),
}

fn write_value(value: &CanonValue, out: &mut Vec<u8>) -> Result<(), WireError> {
    match value {
        CanonValue::Null => out.extend_from_slice(b"null"),
        CanonValue::Bool(true) => out.extend_from_slice(b"true"),
        CanonValue::Bool(false) => out.extend_from_slice(b"false"),
        CanonValue::UInt(v) => out.extend_from_slice(v.to_string().as_bytes()),
        CanonValue::Int(v) => out.extend_from_slice(v.to_string().as_bytes()),
        CanonValue::F32(v) => {
            if !v.is_finite() {
                return Err(WireError::NonRepresentable(format!("f32 {v}")));
            }
            let mut buf = ryu::Buffer::new();
            out.extend_from_slice(buf.format_finite(*v).as_bytes());
        }
        CanonValue::F64(v) => {
            if !v.is_finite() {
                return Err(WireError::NonRepresentable(format!("f64 {v}")));
            }
            let mut buf = ryu::Buffer::new();
            out.extend_from_slice(buf.format_finite(*v).as_bytes());
        }
        CanonValue::Str(s) => write_string(s, out),
        CanonValue::Bytes(b) => write_string(&BASE64.encode(b), out),
        CanonValue::Seq(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out)?;
            }
            out.push(b']');
        }
        CanonValue::Map(entries) => {
            out.push(b'{');
            for (i, (k, v)) in entries.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(k, out);
                out.push(b':');
                write_value(v, out)?;
            }
            out.push(b'}');
        }
    }
    Ok(())
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    out.push(b'"');
    for c in s.chars() {
        match c {
            '"' => out.extend_from_slice(b"\\\""),
            '\\' => out.extend_from_slice(b"\\\\"),
            '\n' => out.extend_from_slice(b"\\n"),
            '\r' => out.extend_from_slice(b"\\r"),
            '\t' => out.extend_from_slice(b"\\t"),
            '\u{08}' => out.extend_from_slice(b"\\b"),
            '\u{0c}' => out.extend_from_slice(b"\\f"),
            c if (c as u32) < 0x20 => {
                out.extend_from_slice(format!("\\u{:04x}", c as u32).as_bytes());
            }
            c => {
                let mut buf = [0u8; 4];
                out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
        }
    }
    out.push(b'"');
}

impl ser::Error for WireError {
    fn custom<T: std::fmt::Display>(msg: T) -> Self {
        WireError::NonRepresentable(msg.to_string())
    }
}

struct CanonSerializer;

impl ser::Serializer for CanonSerializer {
    type Ok = CanonValue;
    type Error = WireError;
    type SerializeSeq = SeqBuilder;
    type SerializeTuple = SeqBuilder;
    type SerializeTupleStruct = SeqBuilder;
    type SerializeTupleVariant = VariantSeqBuilder;
    type SerializeMap = MapBuilder;
    type SerializeStruct = MapBuilder;
    type SerializeStructVariant = VariantMapBuilder;

    fn serialize_bool(self, v: bool) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Bool(v))
    }

    fn serialize_i8(self, v: i8) -> Result<CanonValue, WireError> {
        self.serialize_i64(i64::from(v))
    }

    fn serialize_i16(self, v: i16) -> Result<CanonValue, WireError> {
        self.serialize_i64(i64::from(v))
    }

    fn serialize_i32(self, v: i32) -> Result<CanonValue, WireError> {
        self.serialize_i64(i64::from(v))
    }

    fn serialize_i64(self, v: i64) -> Result<CanonValue, WireError> {
        if v >= 0 {
            Ok(CanonValue::UInt(v as u64))
        } else {
            Ok(CanonValue::Int(v))
        }
    }

    fn serialize_u8(self, v: u8) -> Result<CanonValue, WireError> {
        self.serialize_u64(u64::from(v))
    }

    fn serialize_u16(self, v: u16) -> Result<CanonValue, WireError> {
        self.serialize_u64(u64::from(v))
    }

    fn serialize_u32(self, v: u32) -> Result<CanonValue, WireError> {
        self.serialize_u64(u64::from(v))
    }

    fn serialize_u64(self, v: u64) -> Result<CanonValue, WireError> {
        Ok(CanonValue::UInt(v))
    }

    fn serialize_f32(self, v: f32) -> Result<CanonValue, WireError> {
        Ok(CanonValue::F32(v))
    }

    fn serialize_f64(self, v: f64) -> Result<CanonValue, WireError> {
        Ok(CanonValue::F64(v))
    }

    fn serialize_char(self, v: char) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Str(v.to_string()))
    }

    fn serialize_str(self, v: &str) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Str(v.to_owned()))
    }

    fn serialize_bytes(self, v: &[u8]) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Bytes(v.to_vec()))
    }

    fn serialize_none(self) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Null)
    }

    fn serialize_some<T: Serialize + ?Sized>(self, value: &T) -> Result<CanonValue, WireError> {
        value.serialize(CanonSerializer)
    }

    fn serialize_unit(self) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Null)
    }

    fn serialize_unit_struct(self, _name: &'static str) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Null)
    }

    fn serialize_unit_variant(
        self,
        _name: &'static str,
        _index: u32,
        variant: &'static str,
    ) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Str(variant.to_owned()))
    }

    fn serialize_newtype_struct<T: Serialize + ?Sized>(
        self,
        _name: &'static str,
        value: &T,
    ) -> Result<CanonValue, WireError> {
        value.serialize(CanonSerializer)
    }

    fn serialize_newtype_variant<T: Serialize + ?Sized>(
        self,
        _name: &'static str,
        _index: u32,
        variant: &'static str,
        value: &T,
    ) -> Result<CanonValue, WireError> {
        let mut map = BTreeMap::new();
        map.insert(variant.to_owned(), value.serialize(CanonSerializer)?);
        Ok(CanonValue::Map(map))
    }

    fn serialize_seq(self, len: Option<usize>) -> Result<SeqBuilder, WireError> {
        Ok(SeqBuilder {
            items: Vec::with_capacity(len.unwrap_or(0)),
        })
    }

    fn serialize_tuple(self, len: usize) -> Result<SeqBuilder, WireError> {
        self.serialize_seq(Some(len))
    }

    fn serialize_tuple_struct(self, _name: &'static str, len: usize) -> Result<SeqBuilder, WireError> {
        self.serialize_seq(Some(len))
    }

    fn serialize_tuple_variant(
        self,
        _name: &'static str,
        _index: u32,
        variant: &'static str,
        len: usize,
    ) -> Result<VariantSeqBuilder, WireError> {
        Ok(VariantSeqBuilder {
            variant,
            items: Vec::with_capacity(len),
        })
    }

    fn serialize_map(self, _len: Option<usize>) -> Result<MapBuilder, WireError> {
        Ok(MapBuilder {
            entries: BTreeMap::new(),
            pending_key: None,
        })
    }

    fn serialize_struct(self, _name: &'static str, _len: usize) -> Result<MapBuilder, WireError> {
        self.serialize_map(None)
    }

    fn serialize_struct_variant(
        self,
        _name: &'static str,
        _index: u32,
        variant: &'static str,
        _len: usize,
    ) -> Result<VariantMapBuilder, WireError> {
        Ok(VariantMapBuilder {
            variant,
            entries: BTreeMap::new(),
        })
    }
}

struct SeqBuilder {
    items: Vec<CanonValue>,
}

impl ser::SerializeSeq for SeqBuilder {
    type Ok = CanonValue;
    type Error = WireError;

    fn serialize_element<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<(), WireError> {
        self.items.push(value.serialize(CanonSerializer)?);
        Ok(())
    }

    fn end(self) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Seq(self.items))
    }
}

impl ser::SerializeTuple for SeqBuilder {
    type Ok = CanonValue;
    type Error = WireError;

    fn serialize_element<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<(), WireError> {
        ser::SerializeSeq::serialize_element(self, value)
    }

    fn end(self) -> Result<CanonValue, WireError> {
        ser::SerializeSeq::end(self)
    }
}

impl ser::SerializeTupleStruct for SeqBuilder {
    type Ok = CanonValue;
    type Error = WireError;

    fn serialize_field<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<(), WireError> {
        ser::SerializeSeq::serialize_element(self, value)
    }

    fn end(self) -> Result<CanonValue, WireError> {
        ser::SerializeSeq::end(self)
    }
}

struct VariantSeqBuilder {
    variant: &'static str,
    items: Vec<CanonValue>,
}

impl ser::SerializeTupleVariant for VariantSeqBuilder {
    type Ok = CanonValue;
    type Error = WireError;

    fn serialize_field<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<(), WireError> {
        self.items.push(value.serialize(CanonSerializer)?);
        Ok(())
    }

    fn end(self) -> Result<CanonValue, WireError> {
        let mut map = BTreeMap::new();
        map.insert(self.variant.to_owned(), CanonValue::Seq(self.items));
        Ok(CanonValue::Map(map))
    }
}

struct MapBuilder {
    entries: BTreeMap<String, CanonValue>,
    pending_key: Option<String>,
}

impl ser::SerializeMap for MapBuilder {
    type Ok = CanonValue;
    type Error = WireError;

    fn serialize_key<T: Serialize + ?Sized>(&mut self, key: &T) -> Result<(), WireError> {
        self.pending_key = Some(key.serialize(KeySerializer)?);
        Ok(())
    }

    fn serialize_value<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<(), WireError> {
        let key = self
            .pending_key
            .take()
            .ok_or_else(|| WireError::NonRepresentable("map value without key".into()))?;
        self.entries.insert(key, value.serialize(CanonSerializer)?);
        Ok(())
    }

    fn end(self) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Map(self.entries))
    }
}

impl ser::SerializeStruct for MapBuilder {
    type Ok = CanonValue;
    type Error = WireError;

    fn serialize_field<T: Serialize + ?Sized>(
        &mut self,
        key: &'static str,
        value: &T,
    ) -> Result<(), WireError> {
        self.entries
            .insert(key.to_owned(), value.serialize(CanonSerializer)?);
        Ok(())
    }

    fn skip_field(&mut self, _key: &'static str) -> Result<(), WireError> {
        Ok(())
    }

    fn end(self) -> Result<CanonValue, WireError> {
        Ok(CanonValue::Map(self.entries))
    }
}

struct VariantMapBuilder {
    variant: &'static str,
    entries: BTreeMap<String, CanonValue>,
}

impl ser::SerializeStructVariant for VariantMapBuilder {
    type Ok = CanonValue;
    type Error = WireError;

    fn serialize_field<T: Serialize + ?Sized>(
        &mut self,
        key: &'static str,
        value: &T,
    ) -> Result<(), WireError> {
        self.entries
            .insert(key.to_owned(), value.serialize(CanonSerializer)?);
        Ok(())
    }

    fn end(self) -> Result<CanonValue, WireError> {
        let mut map = BTreeMap::new();
        map.insert(self.variant.to_owned(), CanonValue::Map(self.entries));
        Ok(CanonValue::Map(map))
    }
}

/// Map keys must become JSON strings; numeric keys are stringified the same
/// way `serde_json` does.
struct KeySerializer;

macro_rules! key_to_string {
    ($($method:ident: $ty:ty,)*) => {
        $(fn $method(self, v: $ty) -> Result<String, WireError> {
            Ok(v.to_string())
        })*
    };
}

impl ser::Serializer for KeySerializer {
    type Ok = String;
    type Error = WireError;
    type SerializeSeq = ser::Impossible<String, WireError>;
    type SerializeTuple = ser::Impossible<String, WireError>;
    type SerializeTupleStruct = ser::Impossible<String, WireError>;
    type SerializeTupleVariant = ser::Impossible<String, WireError>;
    type SerializeMap = ser::Impossible<String, WireError>;
    type SerializeStruct = ser::Impossible<String, WireError>;
    type SerializeStructVariant = ser::Impossible<String, WireError>;

    key_to_string! {
        serialize_bool: bool,
        serialize_i8: i8,
        serialize_i16: i16,
        serialize_i32: i32,
        serialize_i64: i64,
        serialize_u8: u8,
        serialize_u16: u16,
        serialize_u32: u32,
        serialize_u64: u64,
        serialize_char: char,
    }

    fn serialize_f32(self, _v: f32) -> Result<String, WireError> {
        Err(WireError::NonRepresentable("float map key".into()))
    }

    fn serialize_f64(self, _v: f64) -> Result<String, WireError> {
        Err(WireError::NonRepresentable("float map key".into()))
    }

    fn serialize_str(self, v: &str) -> Result<String, WireError> {
        Ok(v.to_owned())
    }

    fn serialize_bytes(self, _v: &[u8]) -> Result<String, WireError> {
        Err(WireError::NonRepresentable("bytes map key".into()))
    }

    fn serialize_none(self) -> Result<String, WireError> {
        Err(WireError::NonRepresentable("null map key".into()))
    }

    fn serialize_some<T: Serialize + ?Sized>(self, _value: &T) -> Result<String, WireError> {
        Err(WireError::NonRepresentable("optional map key".into()))
    }

    fn serialize_unit(self) -> Result<String, WireError> {
        Err(WireError::NonRepresentable("unit map key".into()))
    }

    fn serialize_unit_struct(self, _name: &'static str) -> Result<String, WireError> {
        Err(WireError::NonRepresentable("unit map key".into()))
    }

    fn serialize_unit_variant(
        self,
        _name: &'static str,
        _index: u32,
        variant: &'static str,
    ) -> Result<String, WireError> {
        Ok(variant.to_owned())
    }

    fn serialize_newtype_struct<T: Serialize + ?Sized>(
        self,
        _name: &'static str,
        value: &T,
    ) -> Result<String, WireError> {
        value.serialize(KeySerializer)
    }

    fn serialize_newtype_variant<T: Serialize + ?Sized>(
        self,
        _name: &'static str,
        _index: u32,
        _variant: &'static str,
        _value: &T,
    ) -> Result<String, WireError> {
        Err(WireError::NonRepresentable("variant map key".into()))
    }

    fn serialize_seq(self, _len: Option<usize>) -> Result<Self::SerializeSeq, WireError> {
        Err(WireError::NonRepresentable("sequence map key".into()))
    }

    fn serialize_tuple(self, _len: usize) -> Result<Self::SerializeTuple, WireError> {
        Err(WireError::NonRepresentable("tuple map key".into()))
    }

    fn serialize_tuple_struct(
        self,
        _name: &'static str,
        _len: usize,
    ) -> Result<Self::SerializeTupleStruct, WireError> {
        Err(WireError::NonRepresentable("tuple map key".into()))
    }

    fn serialize_tuple_variant(
        self,
        _name: &'static str,
        _index: u32,
        _variant: &'static str,
        _len: usize,
    ) -> Result<Self::SerializeTupleVariant, WireError> {
        Err(WireError::NonRepresentable("tuple map key".into()))
    }

    fn serialize_map(self, _len: Option<usize>) -> Result<Self::SerializeMap, WireError> {
        Err(WireError::NonRepresentable("map map key".into()))
    }

    fn serialize_struct(
        self,
        _name: &'static str,
        _len: usize,
    ) -> Result<Self::SerializeStruct, WireError> {
        Err(WireError::NonRepresentable("struct map key".into()))
    }

    fn serialize_struct_variant(
        self,
        _name: &'static str,
        _index: u32,
        _variant: &'static str,
        _len: usize,
    ) -> Result<Self::SerializeStructVariant, WireError> {
        Err(WireError::NonRepresentable("struct map key".into()))
    }
}
