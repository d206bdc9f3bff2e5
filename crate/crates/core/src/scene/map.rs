use serde::{Deserialize, Serialize};

use super::geometry::{BoxDims, Polygon, Polyline, Pose2};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Vehicle, Category::Pedestrian, Category::Cyclist];

    pub fn index(self) -> usize {
        match self {
            Category::Vehicle => 0,
            Category::Pedestrian => 1,
            Category::Cyclist => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Vehicle => "vehicle",
            Category::Pedestrian => "pedestrian",
            Category::Cyclist => "cyclist",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StaticObstacle<T: Scalar> {
    pub pose: Pose2<T>,
    pub dims: BoxDims<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SceneMap<T: Scalar> {
    pub drivable: Polygon<T>,
    pub route: Polyline<T>,
    pub speed_limit: T,
    #[serde(default)]
    pub static_obstacles: Vec<StaticObstacle<T>>,
}

impl<T: Scalar> SceneMap<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed_limit > T::zero()) {
            return Err(Error::Geometry("speed limit must be positive".into()));
        }
        if let Some(p) = self
            .route
            .vertices()
            .iter()
            .find(|&&p| !self.drivable.contains(p))
        {
            return Err(Error::Geometry(format!(
                "route vertex ({}, {}) lies outside the drivable area",
                p.x, p.y
            )));
        }
        Ok(())
    }
}

/// One agent's recorded motion. `history` ends at the current pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AgentTrack<T: Scalar> {
    pub category: Category,
    pub dims: BoxDims<T>,
    pub history: Vec<Pose2<T>>,
    #[serde(default)]
    pub future: Option<Vec<Pose2<T>>>,
}

impl<T: Scalar> AgentTrack<T> {
    pub fn current(&self) -> &Pose2<T> {
        self.history.last().expect("history is non-empty")
    }

    /// History followed by the future, if recorded.
    pub fn full_path(&self) -> Vec<Pose2<T>> {
        let mut p = self.history.clone();
        if let Some(f) = &self.future {
            p.extend_from_slice(f);
        }
        p
    }
}

/// A planning problem: map, agents (ego first), token interval, and horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Scenario<T: Scalar> {
    pub id: String,
    pub map: SceneMap<T>,
    pub agents: Vec<AgentTrack<T>>,
    pub dt: T,
    pub horizon: usize,
}

impl<T: Scalar> Scenario<T> {
    pub fn new(
        id: impl Into<String>,
        map: SceneMap<T>,
        agents: Vec<AgentTrack<T>>,
        dt: T,
        horizon: usize,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            map,
            agents,
            dt,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        let ego = self
            .agents
            .first()
            .ok_or_else(|| Error::InvalidInput("scenario has no agents".into()))?;
        if ego.category != Category::Vehicle {
            return Err(Error::InvalidInput("ego must be a vehicle".into()));
        }
        if self.horizon < 1 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        if !(self.dt > T::zero()) {
            return Err(Error::InvalidInput("dt must be positive".into()));
        }
        let h = ego.history.len();
        if h < 2 {
            return Err(Error::InvalidInput(
                "agents need at least 2 history poses".into(),
            ));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.history.len() != h {
                return Err(Error::InvalidInput(format!(
                    "agent {i} history length {} differs from ego's {h}",
                    a.history.len()
                )));
            }
            if let Some(f) = &a.future {
                if f.len() != self.horizon {
                    return Err(Error::InvalidInput(format!(
                        "agent {i} future length {} differs from horizon {}",
                        f.len(),
                        self.horizon
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn ego(&self) -> &AgentTrack<T> {
        &self.agents[0]
    }

    /// Number of history poses shared by all agents.
    pub fn history_len(&self) -> usize {
        self.agents[0].history.len()
    }

    pub fn has_full_futures(&self) -> bool {
        self.agents.iter().all(|a| a.future.is_some())
    }
}
