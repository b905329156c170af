"""Shared data model: descriptors, manifests, port taxonomy, refs and traces."""

from dci.model.codec import CodecError, canonical_json, decode, encode, from_jsonable, to_jsonable
from dci.model.types import (
    ArchiveManifest,
    AssemblyDescriptor,
    AttributeDecl,
    AttrValue,
    Behavior,
    Bool,
    ComponentArchive,
    ConnectionSpec,
    DeploymentTrace,
    EntityKind,
    EntityRef,
    Float,
    InstanceSpec,
    Int,
    NodeMetaInfo,
    PlacementSpec,
    PortAddress,
    PortDecl,
    PortKind,
    RegistrationSpec,
    RegistrationTarget,
    Step,
    Str,
    TraceEvent,
    ValidationError,
    ValueType,
    is_identifier,
)
from dci.model.validate import check_port_compat, validate_descriptor, validate_manifest

__all__ = [
    "ArchiveManifest",
    "AssemblyDescriptor",
    "AttrValue",
    "AttributeDecl",
    "Behavior",
    "Bool",
    "CodecError",
    "ComponentArchive",
    "ConnectionSpec",
    "DeploymentTrace",
    "EntityKind",
    "EntityRef",
    "Float",
    "InstanceSpec",
    "Int",
    "NodeMetaInfo",
    "PlacementSpec",
    "PortAddress",
    "PortDecl",
    "PortKind",
    "RegistrationSpec",
    "RegistrationTarget",
    "Step",
    "Str",
    "TraceEvent",
    "ValidationError",
    "ValueType",
    "canonical_json",
    "check_port_compat",
    "decode",
    "encode",
    "from_jsonable",
    "is_identifier",
    "to_jsonable",
    "validate_descriptor",
    "validate_manifest",
]
