//! Name-keyed tables of interchangeable strategies.

use crate::error::{Error, Result};

/// Constructors for one family of strategies, selected by name at runtime.
pub struct Registry<S: ?Sized, A> {
    family: &'static str,
    entries: Vec<(&'static str, fn(&A) -> Box<S>)>,
}

impl<S: ?Sized, A> Registry<S, A> {
    pub fn new(family: &'static str) -> Self {
        Registry {
            family,
            entries: Vec::new(),
        }
    }

    /// Adds (or replaces) the constructor registered under `name`.
    pub fn register(&mut self, name: &'static str, ctor: fn(&A) -> Box<S>) -> &mut Self {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = ctor,
            None => self.entries.push((name, ctor)),
        }
        self
    }

    pub fn create(&self, name: &str, args: &A) -> Result<Box<S>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, ctor)| ctor(args))
            .ok_or_else(|| Error::UnknownStrategy {
                family: self.family,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    struct Plain(String);

    impl Greeter for Plain {
        fn greet(&self) -> String {
            format!("hello {}", self.0)
        }
    }

    #[test]
    fn lookup_by_name() {
        let mut reg: Registry<dyn Greeter, String> = Registry::new("greeter");
        reg.register("plain", |who| Box::new(Plain(who.clone())));
        assert_eq!(reg.create("plain", &"x".into()).unwrap().greet(), "hello x");
        let err = reg.create("fancy", &"x".into()).err().unwrap().to_string();
        assert!(err.contains("fancy") && err.contains("plain"), "{err}");
        assert_eq!(reg.names(), vec!["plain"]);
    }
}
