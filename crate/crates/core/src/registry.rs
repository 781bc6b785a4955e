//! Name-keyed constructors for interchangeable algorithm variants.

use crate::error::{Error, Result};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(&'static str, fn() -> Box<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Adds a variant; a later registration under the same name replaces it.
    pub fn register(&mut self, name: &'static str, ctor: fn() -> Box<T>) -> &mut Self {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, ctor));
        self
    }

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, ctor)| ctor())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn hello(&self) -> &'static str;
    }
    struct A;
    struct B;
    impl Greeter for A {
        fn hello(&self) -> &'static str {
            "a"
        }
    }
    impl Greeter for B {
        fn hello(&self) -> &'static str {
            "b"
        }
    }

    #[test]
    fn lookup_and_replacement() {
        let mut r: Registry<dyn Greeter> = Registry::new("greeter");
        r.register("x", || Box::new(A));
        assert_eq!(r.create("x").unwrap().hello(), "a");
        r.register("x", || Box::new(B));
        assert_eq!(r.create("x").unwrap().hello(), "b");
        assert_eq!(r.names(), vec!["x"]);
        let err = r.create("y").err().unwrap().to_string();
        assert!(err.contains("greeter") && err.contains("x"), "{err}");
    }
}
