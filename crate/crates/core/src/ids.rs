//! Small identifier newtypes shared by every module.

use core::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident($inner:ty), $prefix:literal) => {
        $(#[$meta])*
        #[derive(
            Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl From<$inner> for $name {
            fn from(v: $inner) -> Self {
                Self(v)
            }
        }
    };
}

id_type!(
    /// A vertex of the fabric graph (switch, cache VM, user access point or origin).
    NodeId(u32),
    "n"
);
id_type!(
    /// A tenant of the shared infrastructure (a virtual network operator).
    TenantId(u32),
    "t"
);
id_type!(
    /// A virtual cache instance.
    CacheId(u32),
    "c"
);
id_type!(VlanId(u16), "vlan");
id_type!(
    /// A tenant-created network that other tenants may be granted access to.
    NetworkId(u32),
    "net"
);
id_type!(
    /// The origin server identity a request is addressed to.
    DestinationId(u32),
    "d"
);
id_type!(ObjectKey(u64), "k");
