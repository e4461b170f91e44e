use std::collections::{BTreeMap, BTreeSet};

use crate::attributes::{AttributeSet, Category, Gender, Price};
use crate::tables::NormalizationTables;

fn first_value<'a>(raw: &'a BTreeMap<String, String>, keys: &[String]) -> Option<&'a str> {
    keys.iter().find_map(|want| {
        raw.iter()
            .find(|(k, v)| k.eq_ignore_ascii_case(want) && !v.trim().is_empty())
            .map(|(_, v)| v.as_str())
    })
}

/// Maps vendor-shaped metadata onto standardized attributes. Never fails:
/// anything unrecognised becomes `unknown` or empty. Geography is not part of
/// vendor metadata and is left empty for the caller to fill.
pub fn enrich(raw: &BTreeMap<String, String>, tables: &NormalizationTables) -> AttributeSet {
    let keys = &tables.keys;
    let category = first_value(raw, &keys.category).map_or(Category::Unknown, |v| tables.category_of(v));
    let gender = first_value(raw, &keys.gender).map_or(Gender::Unknown, |v| tables.gender_of(v));
    let brand = first_value(raw, &keys.brand).map(|b| b.trim().to_owned()).unwrap_or_default();
    let price = first_value(raw, &keys.price).and_then(|p| {
        let currency = first_value(raw, &keys.currency)
            .map(|c| c.trim().to_uppercase())
            .or_else(|| currency_from_symbol(p))
            .unwrap_or_default();
        let minor = parse_minor_units(p, tables.currency_exponent(&currency))?;
        Some(Price { minor, currency })
    });
    let sizes = first_value(raw, &keys.sizes)
        .map(|s| {
            s.split([',', '|', ';', '/'])
                .map(|t| t.trim().to_uppercase())
                .filter(|t| !t.is_empty())
                .collect()
        })
        .unwrap_or_else(BTreeSet::new);
    AttributeSet {
        category,
        gender,
        brand,
        price,
        sizes,
        geography: String::new(),
    }
}

fn currency_from_symbol(price: &str) -> Option<String> {
    let p = price.trim();
    let code = if p.starts_with('$') {
        "USD"
    } else if p.starts_with('₹') {
        "INR"
    } else if p.starts_with('¥') {
        "JPY"
    } else if p.starts_with('€') {
        "EUR"
    } else if p.starts_with('£') {
        "GBP"
    } else {
        return None;
    };
    Some(code.to_owned())
}

/// Parses a decimal amount into minor units, rounding extra digits half-up.
/// Thousands separators and currency symbols are ignored.
pub fn parse_minor_units(text: &str, exponent: u32) -> Option<u64> {
    let cleaned: String = text.chars().filter(|c| c.is_ascii_digit() || *c == '.').collect();
    if text.trim_start().starts_with('-') || cleaned.is_empty() {
        return None;
    }
    let (int_part, frac_part) = match cleaned.split_once('.') {
        Some((i, f)) if !f.contains('.') => (i, f),
        Some(_) => return None,
        None => (cleaned.as_str(), ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let scale = 10u64.checked_pow(exponent)?;
    let int: u64 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
    let digits: Vec<u64> = frac_part.bytes().map(|b| u64::from(b - b'0')).collect();
    let mut frac = 0u64;
    for i in 0..exponent as usize {
        frac = frac * 10 + digits.get(i).copied().unwrap_or(0);
    }
    let round_up = digits.get(exponent as usize).is_some_and(|&d| d >= 5);
    int.checked_mul(scale)?.checked_add(frac)?.checked_add(u64::from(round_up))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn gender_and_category() {
        let a = enrich(&raw(&[("gender", "MENS"), ("category", "Polo Shirt")]), &NormalizationTables::default());
        assert_eq!(a.gender, Gender::Men);
        assert_eq!(a.category, Category::Topwear);
    }

    #[test]
    fn empty_metadata() {
        let a = enrich(&BTreeMap::new(), &NormalizationTables::default());
        assert_eq!(a, AttributeSet::default());
    }

    #[test]
    fn price_decimal_shift() {
        let a = enrich(&raw(&[("price", "49.99"), ("currency", "USD")]), &NormalizationTables::default());
        assert_eq!(a.price, Some(Price { minor: 4999, currency: "USD".into() }));
    }

    #[test]
    fn vendor_key_aliases_and_sizes() {
        let a = enrich(
            &raw(&[("Brand_Name", " Acme "), ("Product_Type", "Slim Fit Jeans"), ("Size", "s, m|xl"), ("Sex", "Female")]),
            &NormalizationTables::default(),
        );
        assert_eq!(a.brand, "Acme");
        assert_eq!(a.category, Category::Bottomwear);
        assert_eq!(a.gender, Gender::Women);
        assert_eq!(a.sizes.iter().map(String::as_str).collect::<Vec<_>>(), ["M", "S", "XL"]);
    }

    #[test]
    fn unmapped_values_are_unknown() {
        let a = enrich(&raw(&[("gender", "kids"), ("category", "gadget")]), &NormalizationTables::default());
        assert_eq!((a.category, a.gender), (Category::Unknown, Gender::Unknown));
    }

    #[test]
    fn minor_units() {
        assert_eq!(parse_minor_units("49.99", 2), Some(4999));
        assert_eq!(parse_minor_units("$1,299", 2), Some(129_900));
        assert_eq!(parse_minor_units("10.005", 2), Some(1001));
        assert_eq!(parse_minor_units("10.004", 2), Some(1000));
        assert_eq!(parse_minor_units(".5", 2), Some(50));
        assert_eq!(parse_minor_units("1500", 0), Some(1500));
        assert_eq!(parse_minor_units("1500.6", 0), Some(1501));
        assert_eq!(parse_minor_units("-3", 2), None);
        assert_eq!(parse_minor_units("free", 2), None);
        assert_eq!(parse_minor_units("1.2.3", 2), None);
    }

    #[test]
    fn currency_symbols() {
        let t = NormalizationTables::default();
        let a = enrich(&raw(&[("price", "¥1,500")]), &t);
        assert_eq!(a.price, Some(Price { minor: 1500, currency: "JPY".into() }));
        let a = enrich(&raw(&[("price", "₹999.50")]), &t);
        assert_eq!(a.price, Some(Price { minor: 99950, currency: "INR".into() }));
    }
}
