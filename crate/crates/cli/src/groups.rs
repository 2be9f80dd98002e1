use std::str::FromStr;

/// How units are split into sequential groups: `KxEqual` or an explicit list of unit counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupSpec {
    Equal(usize),
    Units(Vec<usize>),
}

impl FromStr for GroupSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
        let head = compact
            .strip_suffix("equal")
            .unwrap_or(&compact)
            .strip_suffix('x');
        if let Some(k) = head {
            let k: usize = k.parse().map_err(|_| format!("bad group count in '{s}'"))?;
            if k == 0 {
                return Err("group count must be positive".into());
            }
            return Ok(GroupSpec::Equal(k));
        }
        let units = parse_list::<usize>(&compact).map_err(|e| format!("bad group list '{s}': {e}"))?;
        if units.contains(&0) {
            return Err("group unit counts must be positive".into());
        }
        Ok(GroupSpec::Units(units))
    }
}

impl GroupSpec {
    /// Units per group for `total` units. Equal splits go pair by pair, with
    /// leftover pairs given to the earliest groups.
    pub fn units(&self, total: usize) -> Result<Vec<usize>, String> {
        match self {
            GroupSpec::Equal(k) => {
                if total % 2 != 0 {
                    return Err(format!("cannot split {total} units into pairs"));
                }
                let pairs = total / 2;
                if pairs < *k {
                    return Err(format!("{total} units cannot fill {k} groups"));
                }
                Ok((0..*k)
                    .map(|i| 2 * (pairs / k + usize::from(i < pairs % k)))
                    .collect())
            }
            GroupSpec::Units(v) => {
                let sum: usize = v.iter().sum();
                if sum != total {
                    return Err(format!("groups cover {sum} units but the data has {total}"));
                }
                Ok(v.clone())
            }
        }
    }

    /// Relative group sizes for budget allocation.
    pub fn relative_sizes(&self) -> Vec<f64> {
        match self {
            GroupSpec::Equal(k) => vec![1.0; *k],
            GroupSpec::Units(v) => v.iter().map(|&u| u as f64 / 2.0).collect(),
        }
    }
}

/// `label=GROUPS[@PLAN]`, e.g. `ii=184,182,182@62,284,1654`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignArg {
    pub label: String,
    pub groups: GroupSpec,
    pub plan: Option<Vec<u64>>,
}

impl FromStr for DesignArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (label, rest) = match s.split_once('=') {
            Some((l, r)) => (l.trim().to_string(), r),
            None => (s.trim().to_string(), s),
        };
        let (groups, plan) = match rest.split_once('@') {
            Some((g, p)) => (g, Some(parse_list::<u64>(p).map_err(|e| format!("bad plan in '{s}': {e}"))?)),
            None => (rest, None),
        };
        Ok(DesignArg {
            label,
            groups: groups.parse()?,
            plan,
        })
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let items: Result<Vec<T>, _> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| format!("'{t}': {e}")))
        .collect();
    match items {
        Ok(v) if v.is_empty() => Err("empty list".into()),
        other => other,
    }
}
