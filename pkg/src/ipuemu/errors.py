"""Exception hierarchy shared across the emulator."""


class IpuError(Exception):
    """Base class for all emulator errors."""


class AsmSyntaxError(IpuError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ImageTooLarge(IpuError):
    pass


class UnknownSignal(IpuError):
    pass


class IllegalEncoding(IpuError):
    pass


class PolicyRejected(IpuError):
    pass


class InvalidTransition(IpuError):
    pass


class MachineFault(IpuError):
    """Raised inside execution; the machine converts it to the ERROR state."""

    kind = "fault"

    def __init__(self, message, pc=None, addr=None):
        self.pc = pc
        self.addr = addr
        super().__init__(message)


class IllegalInstruction(MachineFault):
    kind = "IllegalInstruction"


class MemFault(MachineFault):
    kind = "MemFault"


class WriteToImem(MachineFault):
    kind = "WriteToImem"


class IllegalLoopBody(MachineFault):
    kind = "IllegalLoopBody"


class BlockFault(MachineFault):
    kind = "BlockFault"


class AbiMismatch(IpuError):
    pass


class MalformedRecord(IpuError):
    def __init__(self, message, line=None, offset=None):
        self.line = line
        self.offset = offset
        where = f"line {line}" if line is not None else f"offset {offset}" if offset is not None else ""
        super().__init__(f"{where}: {message}" if where else message)


class NonMonotonicCycle(MalformedRecord):
    pass


class UnknownScenario(IpuError):
    pass


class UnknownDevice(IpuError):
    pass


class MalformedPayload(IpuError):
    pass


class RoutineTimeout(MachineFault):
    kind = "RoutineTimeout"
