//! Closed vocabularies shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

macro_rules! vocabulary {
    (
        $(#[$meta:meta])*
        $name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = UnknownValue;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let lowered = s.trim().to_ascii_lowercase();
                match lowered.as_str() {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    _ => Err(UnknownValue {
                        kind: stringify!($name),
                        value: s.to_string(),
                    }),
                }
            }
        }
    };
}

/// A string that does not name any member of a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind} `{value}`")]
pub struct UnknownValue {
    pub kind: &'static str,
    pub value: String,
}

vocabulary! {
    /// Batch scheduler run by a cluster.
    Scheduler { Slurm => "slurm", Pbs => "pbs" | "pbspro" | "pbs-pro" }
}

vocabulary! {
    /// Process-spawning tool that starts the distributed workers.
    Launcher {
        Torchrun => "torchrun" | "torch.distributed.run",
        Mpiexec => "mpiexec" | "mpirun",
        Deepspeed => "deepspeed",
        Accelerate => "accelerate",
        Srun => "srun",
    }
}

vocabulary! {
    /// Deep-learning framework driving the job.
    Framework {
        Pytorch => "pytorch" | "torch",
        Deepspeed => "deepspeed",
        Accelerate => "accelerate",
    }
}

vocabulary! {
    /// Parallel training strategy.
    Strategy {
        Ddp => "ddp",
        Fsdp => "fsdp",
        Zero3 => "zero3" | "zero-3",
    }
}

vocabulary! {
    ModuleSystem { Lmod => "lmod", None => "none" }
}

vocabulary! {
    PythonEnv { Anaconda => "anaconda", Venv => "venv", Native => "native" }
}

vocabulary! {
    /// Where a bound value came from.
    Provenance { User => "user", Derived => "derived", Default => "default" }
}

vocabulary! {
    /// Kind of a typed repair edit.
    ActionKind {
        SetParam => "set_param",
        PrependLine => "prepend_line",
        ExportEnv => "export_env",
        AddModuleLoad => "add_module_load",
        PinVersion => "pin_version",
        SwitchTemplate => "switch_template",
        AddArg => "add_arg",
    }
}

vocabulary! {
    /// Failure taxonomy used by fault rules and diagnoses.
    Category { Env => "env", Framework => "framework", User => "user", Unknown => "unknown" }
}

impl Launcher {
    /// Framework a launcher implies when the user names only the launcher.
    ///
    /// `mpiexec` and `srun` are generic process launchers; the bundled templates
    /// only ever run PyTorch programs under them.
    pub fn implied_framework(self) -> Framework {
        match self {
            Launcher::Deepspeed => Framework::Deepspeed,
            Launcher::Accelerate => Framework::Accelerate,
            Launcher::Torchrun | Launcher::Mpiexec | Launcher::Srun => Framework::Pytorch,
        }
    }
}

impl Framework {
    /// Launcher a framework brings along, if it has its own.
    pub fn own_launcher(self) -> Option<Launcher> {
        match self {
            Framework::Deepspeed => Some(Launcher::Deepspeed),
            Framework::Accelerate => Some(Launcher::Accelerate),
            Framework::Pytorch => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_is_case_insensitive_and_accepts_aliases() {
        assert_eq!("PBS".parse::<Scheduler>().unwrap(), Scheduler::Pbs);
        assert_eq!("mpirun".parse::<Launcher>().unwrap(), Launcher::Mpiexec);
        assert_eq!("ZeRO-3".parse::<Strategy>().unwrap(), Strategy::Zero3);
        assert!("horovod".parse::<Launcher>().is_err());
    }

    #[test]
    fn serde_uses_lowercase_names() {
        let json = serde_json::to_string(&Launcher::Torchrun).unwrap();
        assert_eq!(json, "\"torchrun\"");
        let back: Strategy = serde_json::from_str("\"zero3\"").unwrap();
        assert_eq!(back, Strategy::Zero3);
    }

    #[test]
    fn launcher_implication_table() {
        assert_eq!(Launcher::Torchrun.implied_framework(), Framework::Pytorch);
        assert_eq!(Launcher::Deepspeed.implied_framework(), Framework::Deepspeed);
        assert_eq!(Launcher::Accelerate.implied_framework(), Framework::Accelerate);
    }
}
