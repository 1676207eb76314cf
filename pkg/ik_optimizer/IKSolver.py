from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Optional

from .chain_model import KinematicChain, Pose
from .training import GoalSet

if TYPE_CHECKING:
    from .solvers import SolutionBatch


class IKSolver(ABC):
    """Abstract base class for inverse kinematics solvers.

    This class defines the interface that all IK solvers must implement.
    Solvers differ in how they produce candidate joint configurations (network
    inference, genetic search, local refinement or combinations of these) but
    all report their candidates with pose errors and weighted costs.
    """
    def __init__(self, chain: KinematicChain, goals: Optional[GoalSet] = None):
        self.chain = chain
        self.goals = (goals or GoalSet.default(chain)).validate(chain)

    @property
    def name(self) -> str:
        return type(self).__name__

    @abstractmethod
    def solve(self, target: Pose) -> "SolutionBatch":
        """
        Computes joint configurations reaching the target pose.

        Parameters
        ----------
        target : Pose
            Target pose of the tip frame in the base frame of the chain.

        Returns
        -------
        solutions : SolutionBatch
            At least one configuration within the joint limits, with per-row
            position error (mm), rotation error (deg) and weighted cost.
            Solvers always return their best effort; an unreachable target
            yields the closest configurations found.
        """
        pass
