use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::taxonomy::Variant;

/// Object and surface kinds the scene generator knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Road,
    Sidewalk,
    Terrain,
    Building,
    Fence,
    Car,
    Truck,
    Bicycle,
    Person,
    Vegetation,
    Trunk,
    Pole,
    TrafficSign,
    Trashcan,
    Stroller,
}

/// Where an archetype is placed in the corridor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    Ground,
    Road,
    Sidewalk,
    Roadside,
}

impl Archetype {
    pub const ALL: [Archetype; 15] = [
        Archetype::Road,
        Archetype::Sidewalk,
        Archetype::Terrain,
        Archetype::Building,
        Archetype::Fence,
        Archetype::Car,
        Archetype::Truck,
        Archetype::Bicycle,
        Archetype::Person,
        Archetype::Vegetation,
        Archetype::Trunk,
        Archetype::Pole,
        Archetype::TrafficSign,
        Archetype::Trashcan,
        Archetype::Stroller,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Road => "road",
            Archetype::Sidewalk => "sidewalk",
            Archetype::Terrain => "terrain",
            Archetype::Building => "building",
            Archetype::Fence => "fence",
            Archetype::Car => "car",
            Archetype::Truck => "truck",
            Archetype::Bicycle => "bicycle",
            Archetype::Person => "person",
            Archetype::Vegetation => "vegetation",
            Archetype::Trunk => "trunk",
            Archetype::Pole => "pole",
            Archetype::TrafficSign => "traffic_sign",
            Archetype::Trashcan => "trashcan",
            Archetype::Stroller => "stroller",
        }
    }

    pub fn zone(self) -> Zone {
        match self {
            Archetype::Road | Archetype::Sidewalk | Archetype::Terrain => Zone::Ground,
            Archetype::Car | Archetype::Truck => Zone::Road,
            Archetype::Bicycle
            | Archetype::Person
            | Archetype::Pole
            | Archetype::TrafficSign
            | Archetype::Trashcan
            | Archetype::Stroller => Zone::Sidewalk,
            Archetype::Building | Archetype::Fence | Archetype::Vegetation | Archetype::Trunk => {
                Zone::Roadside
            }
        }
    }

    /// Mean return intensity.
    pub fn base_intensity(self) -> f64 {
        match self {
            Archetype::Road => 0.12,
            Archetype::Sidewalk => 0.30,
            Archetype::Terrain => 0.22,
            Archetype::Building => 0.45,
            Archetype::Fence => 0.52,
            Archetype::Car => 0.62,
            Archetype::Truck => 0.55,
            Archetype::Bicycle => 0.40,
            Archetype::Person => 0.18,
            Archetype::Vegetation => 0.34,
            Archetype::Trunk => 0.28,
            Archetype::Pole => 0.68,
            Archetype::TrafficSign => 0.92,
            Archetype::Trashcan => 0.48,
            Archetype::Stroller => 0.38,
        }
    }

    /// Coarse category name of this archetype under `variant`.
    ///
    /// Each variant has its own table; the Ten→Eight→Five projections in
    /// `taxonomy` are checked against these tables, not derived from them.
    pub fn coarse_name(self, variant: Variant) -> &'static str {
        use Archetype::*;
        match variant {
            Variant::Eight => match self {
                Road => "driveable_ground",
                Sidewalk | Terrain => "other_ground",
                Building | Fence => "structure",
                Car | Truck | Bicycle => "vehicles",
                Person => "living_being",
                Vegetation | Trunk => "nature",
                Pole | TrafficSign | Trashcan => "static_objects",
                Stroller => "dynamic_objects",
            },
            Variant::Five => match self {
                Road | Sidewalk | Terrain => "ground",
                Building | Fence | Pole | TrafficSign | Trashcan | Stroller => {
                    "structure_and_objects"
                }
                Car | Truck | Bicycle => "vehicles",
                Person => "living_being",
                Vegetation | Trunk => "nature",
            },
            Variant::Ten => match self {
                Road => "driveable_ground",
                Sidewalk | Terrain => "other_ground",
                Building | Fence => "structure",
                Car | Truck => "four_wheeled_vehicles",
                Bicycle => "two_wheeled_vehicles",
                Person => "living_being",
                Vegetation | Trunk => "nature",
                Pole => "poles",
                TrafficSign | Trashcan => "other_static_objects",
                Stroller => "dynamic_objects",
            },
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown archetype {s:?}"))
    }
}
