"""Small devices shared by the unit tests."""
from flexsim.physmem import MemoryLayout
from flexsim.system import System


def small_layout(total=64):
    return MemoryLayout(total_frames=total, tz_frames=4, mmio={"npu": 2, "smmu": 1},
                        monitor_frames=4, driver_code_frames=2, driver_data_frames=2)


def small_system(total=64, **kw):
    kw.setdefault("frozen", False)
    return System.build(layout=small_layout(total), **kw)
